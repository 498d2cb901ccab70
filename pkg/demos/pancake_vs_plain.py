"""Train plain GS and GS+Pancaking on a noisy tube and compare how well the
Gaussians' thin axes follow the true surface normal.

    python demos/pancake_vs_plain.py [iterations]
"""
import sys
import tempfile

from pancakes.data import synth_scene
from pancakes.trainer import TrainConfig, depth_ssim_mean, evaluate_normals, train

its = int(sys.argv[1]) if len(sys.argv) > 1 else 800
root = tempfile.mkdtemp()
ds, gt, shape = synth_scene(root, "tube", n_views=27, resolution=48, depth_noise=0.02,
                            rot_noise_deg=0.2, trans_noise=0.005, seed=0)
print(f"ground truth: {evaluate_normals(gt, shape):.2f} deg")
for name, geo in (("GS", False), ("GS+Pancaking", True)):
    cfg = TrainConfig(total_iterations=its, densify_from=its // 10, densify_until=its * 4 // 7,
                      densify_interval=50, geo_loss_start=its // 7, depth_on=False, geo_on=geo)
    res = train(ds, cfg)
    print(f"{name:<14} normal deviation {evaluate_normals(res.cloud, shape):6.2f} deg  "
          f"depth-SSIM {depth_ssim_mean(res.cloud, ds, res.test_idx):.4f}")
