"""Dyadic partition, exit times and the non-trapping check for the rescaled flow.

Run: python demos/flow_partition.py [m]
"""
import sys

from degtrap.experiments import incoming_momentum_cap
from degtrap.flow import exit_time_dyadic, make_partition, nontrapping_check
from degtrap.geometry import ManifoldParams


def main(m=2):
    part = make_partition(0.1, 2.0, 0.1, 1e-4, m)
    a = min(0.05, incoming_momentum_cap(m, 2.0))
    print(f"m={m}: {part.N} dyadic intervals at h=1e-4, incoming momentum cap a={a:.4g}")
    for j in range(1, part.N):
        r = exit_time_dyadic(j, part, a, 0.05)
        print(f"j={j:2d}  [{part.y_minus(j):.4f}, {part.y_plus(j):.4f}]  exit time {r['exit_time_abs']:.4e}")
    ok, info = nontrapping_check(0.05, ManifoldParams(m, 3))
    print(f"non-trapping check: {'pass' if ok else 'fail'}, max derivative {info['max_derivative']:.3e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
