"""Fix misclassified held-out points by acting on their top opponents, against random opponents."""
from _common import parser, save

from tracinwe.experiments import RETRAIN_DESK, run_fixing

p = parser(__doc__)
p.add_argument("--methods", default="tracin_we,random")
p.add_argument("--k", default="0,10,20,40")
p.add_argument("--strategy", default="remove_examples", choices=["remove_examples", "pad_word"])
p.add_argument("--repeats", type=int, default=5)
p.add_argument("--max-points", type=int, default=None)
args = p.parse_args()

methods = args.methods.split(",")
k_grid = tuple(int(k) for k in args.k.split(","))
res = run_fixing(RETRAIN_DESK, methods, k_grid, args.repeats, strategy=args.strategy, max_points=args.max_points)
print(f"{len(res.test_ids)} test points; fix probability by k {list(k_grid)}")
for m in methods:
    print(f"{m:<16}", " ".join(f"{v:.3f}" for v in res.fix_prob[m].mean(axis=0)))
if len(methods) >= 2:
    d, se = res.difference(methods[0], methods[1])
    print(f"{methods[0]} - {methods[1]} at k={k_grid[-1]}: {d:.3f} (se {se:.3f})")
save({"test_ids": res.test_ids, "k": list(k_grid), "strategy": args.strategy, "fix_prob": res.fix_prob, "seconds": res.seconds}, args.out, f"fixing_{args.strategy}.json")
