"""The correction chain used for real captures.

Applies an affine warp, radial distortion, white-image weighting and a
vignetting mask on top of the ideal light field, and checks the adjoint
with a random dot product.  Also builds a mask from a synthetic white
image the same way ``lfdeblur mask`` does.
"""

import numpy as np

from lfdeblur.forward import CorrectionSet, ForwardModel, PatchLayout, build_mask
from lfdeblur.geometry import CameraConfig, LatticeSpec
from lfdeblur.harness import linear_motion_kernel, standard_textures
from lfdeblur.psf import build_psf_bank

rng = np.random.default_rng(0)
cam = CameraConfig.table1(3.0)
spec = LatticeSpec.hexagonal(6, 10, 2, 4, (12, 18))
bank = build_psf_bank(cam, spec)
shape = spec.sensor_extent

# a vignetted white image: bright lens centres, dark rims, one dead pixel
rows, cols = np.indices(shape)
white = 0.3 + 0.7 * np.cos(np.pi * ((rows % 10) / 10 - 0.5)) ** 2
white[17, 40] = 0.0
mask = build_mask(white, threshold=0.2, spec=spec)
print(f"mask keeps {mask.mean():.1%} of the sensor")

th = np.deg2rad(0.4)
corr = CorrectionSet(warp=[[np.cos(th), -np.sin(th), 0.7], [np.sin(th), np.cos(th), -0.3]],
                     kappa1=0.03, kappa2=-0.005, mask=mask, white=white)
model = ForwardModel(bank, corr, PatchLayout((2, 3)))
print("texture", model.texture_shape, "-> raw", model.raw_shape, "patches", model.patches.count)

f = standard_textures(spec.texture_extent[0])[2][:, :spec.texture_extent[1]]
ks = [linear_motion_kernel(5, 3, 30 * i) for i in range(6)]
lf = model.apply(f, ks)
r = rng.standard_normal(lf.shape)
lhs, rhs = np.sum(lf * r), np.sum(f * model.adjoint(r, ks))
print(f"<Ax, r> = {lhs:.10f}\n<x, A'r> = {rhs:.10f}")
