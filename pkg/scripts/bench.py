"""Preprocessing and per-pair query cost of the gradient-based scorers on a widened model."""
from _common import parser, save

from tracinwe.desk import DeskConfig, build_desk
from tracinwe.experiments import bench_timings
from tracinwe.textmodel import TrainConfig

p = parser(__doc__)
p.add_argument("--width", type=int, default=256)
p.add_argument("--pairs", type=int, default=300)
args = p.parse_args()

desk = build_desk(DeskConfig(), train_model=False)
t = bench_timings(desk.train, list(desk.test)[:20], desk.model_config, TrainConfig(epochs=3), args.width, n_pairs=args.pairs)
for k, v in t.items():
    print(f"{k:<40} {v:.3g}")
save(t, args.out, "bench.json")
