"""Cancellation ratios per parameter group and per-layer gradient cosines on the desk corpus."""
from _common import parser, save

from tracinwe.desk import DeskConfig
from tracinwe.diagnostics import format_table
from tracinwe.experiments import run_diagnostics
from tracinwe.synth import SynthConfig

p = parser(__doc__)
p.add_argument("--examples", type=int, default=2500)
p.add_argument("--pairs", type=int, default=200)
args = p.parse_args()

res = run_diagnostics(DeskConfig(synth=SynthConfig(n_examples=args.examples)), n_pairs=args.pairs)
print(format_table(list(res.reports.values()), res.cosine))
print(f"C(bias)/C(weight) = {res.bias_weight_ratio:.2f}")
lo, hi = res.cosine.difference_ci("embedding", "fc")
print(f"fc - embedding mean cosine, 95% CI: [{lo:.4f}, {hi:.4f}]")
save(
    {
        "cancellation": {g: r.to_json() for g, r in res.reports.items()},
        "bias_weight_ratio": res.bias_weight_ratio,
        "layer_cosine": res.cosine.to_json(),
        "fc_minus_embedding_ci": [lo, hi],
        "seconds": res.seconds,
    },
    args.out,
    "diagnostics.json",
)
