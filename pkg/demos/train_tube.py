"""Synthesize a small tube scene, train with the full objective, print test metrics.

    python demos/train_tube.py [out_dir] [iterations]
"""
import sys
from pathlib import Path

from pancakes.data import synth_scene
from pancakes.trainer import TrainConfig, evaluate, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_tube")
its = int(sys.argv[2]) if len(sys.argv) > 2 else 1000

ds, gt, shape = synth_scene(out / "data", "tube", n_views=30, resolution=64, seed=0)
cfg = TrainConfig(total_iterations=its, densify_until=min(4000, its),
                  geo_loss_start=min(1000, its - 1))
res = train(ds, cfg, out / "run")
mean = evaluate(res.cloud, ds, res.test_idx, fps_repeats=20)[-1]
print(f"{len(res.cloud)} Gaussians  PSNR {mean.psnr:.2f} dB  SSIM {mean.ssim:.4f}  "
      f"depth MSE {mean.depth_mse:.5f}  {1000 / mean.render_ms:.1f} FPS")
