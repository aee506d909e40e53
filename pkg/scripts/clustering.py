"""Cluster hard training examples by influence distance and check where injected label flips land."""
from _common import parser, save

from tracinwe.desk import DeskConfig
from tracinwe.experiments import run_clustering
from tracinwe.synth import SynthConfig

p = parser(__doc__)
p.add_argument("--flip-rate", type=float, default=0.05)
p.add_argument("--runs", type=int, default=20)
p.add_argument("--threshold", type=float, default=0.8)
args = p.parse_args()

res = run_clustering(DeskConfig(synth=SynthConfig(n_examples=2500, flip_rate=args.flip_rate)), runs=args.runs, cluster_threshold=args.threshold)
print(f"{len(res.hard)} hard examples ({len(set(res.hard) & res.flipped)} of {len(res.flipped)} flipped)")
print(f"clusters of size >= {res.report.min_size}: {[len(c) for c in res.report.clusters]}")
print(f"in a cluster: flipped {res.flipped_rate:.3f}, clean {res.clean_rate:.3f}")
save(
    {
        "hard": res.hard,
        "flipped": res.flipped,
        "clusters": res.report.clusters,
        "common_words": res.report.common_words,
        "flipped_rate": res.flipped_rate,
        "clean_rate": res.clean_rate,
        "seconds": res.seconds,
    },
    args.out,
    "clustering.json",
)
