"""
Bicubic degradation and Y-channel metrics
=========================================

Build an LR image the way the training pipeline does, upscale it back
with plain bicubic, and score the result the way ``lffn eval`` does.
"""

from lffn import imaging

hr = imaging.modcrop(imaging.synthetic_scene(96, 128, seed=3), 4)

for scale in (2, 3, 4):
    hr_s = imaging.modcrop(hr, scale)
    lr = imaging.bicubic_resize(hr_s, 1, scale)
    up = imaging.quantize(imaging.bicubic_resize(lr, scale, 1))
    y_up, y_hr = imaging.rgb_to_ycbcr_y(up), imaging.rgb_to_ycbcr_y(hr_s)
    print(f"x{scale}: LR {lr.shape[1]}x{lr.shape[0]}  "
          f"PSNR {imaging.psnr_y(y_up, y_hr, scale):6.2f} dB  SSIM {imaging.ssim_y(y_up, y_hr, scale):.4f}")

###############################################################################
# The kernel: Keys cubic with a = -0.5, stretched when shrinking.

for x in (0.0, 0.25, 0.5, 0.75, 1.25, 1.75):
    print(f"cubic({x:4}) = {float(imaging.cubic(x)):+.7f}")
