"""Case-deletion curves for several scorers on band-selected test points."""
from dataclasses import asdict

from _common import parser, save

from tracinwe.experiments import RETRAIN_DESK, run_deletion

p = parser(__doc__)
p.add_argument("--methods", default="tracin_we,tracin_last")
p.add_argument("--n-test", type=int, default=12)
p.add_argument("--repeats", type=int, default=5)
args = p.parse_args()

methods = args.methods.split(",")
res = run_deletion(RETRAIN_DESK, methods, n_test=args.n_test, repeats=args.repeats)
print(f"{'method':<16} {'AUC del+':>10} {'AUC del-':>10}")
for m in methods:
    cs = res.curves[m]
    print(f"{m:<16} {sum(c.auc_plus for c in cs) / len(cs):>10.4f} {sum(c.auc_minus for c in cs) / len(cs):>10.4f}")
for w, c in res.comparisons.items():
    print(f"del{'+' if w == 'plus' else '-'}: {c.method_a} - {c.method_b} = {c.diff:.4f} (se {c.stderr:.4f})")
save(
    {
        "test_ids": res.test_ids,
        "curves": {m: [c.to_json() for c in cs] for m, cs in res.curves.items()},
        "comparisons": {w: asdict(c) for w, c in res.comparisons.items()},
        "retrains": res.retrains,
        "seconds": res.seconds,
    },
    args.out,
    "deletion.json",
)
