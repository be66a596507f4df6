"""Train a small guided-fusion network against the plain Add and Concat fusions.

This is a minutes-long miniature of the ablation run by the acceptance suite
(which trains 10k iterations per scheme and seed).  With this short budget the
ordering is noisy; the point is to show the moving parts.

    python demos/fusion_comparison.py [iters]
"""
import sys

from guidedconv.data import synthetic_dataset
from guidedconv.network import NetConfig
from guidedconv.trainer import TrainConfig, format_ablation, run_ablation

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300

train_ds = synthetic_dataset(64, seed=0, height=32, width=64)
val_ds = synthetic_dataset(16, seed=0, height=32, width=64, split="val")
net = NetConfig(stage_count=2, channels=(8, 16), input_height=32, input_width=64)
cfg = TrainConfig(max_iters=iters, batch_size=4, lr_halving_period_iters=max(iters // 3, 1))


def progress(scheme, seed, it, loss):
    if it % 100 == 0:
        print(f"  {scheme.value:10s} iter {it:5d}  loss {loss:.3f}")


rows = run_ablation(["DE_Guided", "Concat", "Add"], net, cfg, train_ds, val_ds, seeds=[0], progress=progress)
print()
print(format_ablation(rows))
