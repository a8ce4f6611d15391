"""Small saturation sweep: mixed norm of the evolved quasimode against k.

Run: python demos/saturation_sweep.py [m n] ; writes runs/demo-saturation/
"""
import sys

from degtrap.experiments import run_saturation, saturation_exponent, write_outputs
from degtrap.geometry import ManifoldParams


def main(m=2, n=4):
    rep = run_saturation(ManifoldParams(m, n), k_list=[50, 100, 200, 400])
    print(f"target exponent {saturation_exponent(m, n):.6f}")
    for s in rep.samples:
        if s["status"] == "ok":
            print(f"k={s['param']:5d}  quantity={s['values']['quantity']:.6f}")
        else:
            print(f"k={s['param']:5d}  error: {s['error']}")
    print("\n".join(rep.summary_lines()))
    print("wrote", ", ".join(write_outputs(rep, "runs/demo-saturation")))


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
