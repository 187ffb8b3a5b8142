"""Reference values for natural cubic spline evaluation, from scipy."""
import numpy as np
from scipy.interpolate import CubicSpline

knots = np.array([0.0, 0.7, 1.5, 2.0, 3.2], dtype=np.float32).astype(np.float64)
values = np.array([1.0, -0.5, 2.0, 0.3, 1.1], dtype=np.float32).astype(np.float64)
xs = np.array([-0.5, 0.0, 0.2, 0.7, 1.0, 1.49, 1.75, 2.0, 2.6, 3.2, 3.8], dtype=np.float32)

s = CubicSpline(knots, values, bc_type="natural", extrapolate=True)
print("knots", *[f"{k:.9g}" for k in knots])
print("values", *[f"{v:.9g}" for v in values])
for x in xs:
    print("point", f"{float(x):.9g}", f"{float(s(float(x))):.12g}")
