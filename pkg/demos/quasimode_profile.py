"""Build the cutoff quasimode for the model operator and print its scalings.

Run: python demos/quasimode_profile.py [m]
"""
import sys

import numpy as np

from degtrap.experiments import fit_exponent
from degtrap.quasimode import QuasimodeSpec, build_quasimode, ground_state, residual


def main(m=2):
    gs = ground_state(m)
    print(f"ground state of -d^2 + x^{2 * m}: lambda0 = {gs.lambda0:.12f} (residual {gs.residual:.1e})")
    hs = np.geomspace(1e-4, 1e-1, 6)
    rows = []
    for h in hs:
        spec = QuasimodeSpec(m, h)
        u = build_quasimode(spec)
        r = residual(spec)
        rows.append((h, u.norm(2), r["relative"]))
        print(f"h={h:.2e}  ||u||_2={u.norm(2):.6e}  ||R||/||u||={r['relative']:.6e}")
    print(f"L2 slope {fit_exponent((h, n) for h, n, _ in rows)[0]:.4f} "
          f"(target {(1 - m) / (2 * (m + 1)):.4f})")
    print(f"residual slope {fit_exponent((h, r) for h, _, r in rows)[0]:.4f} (target {2 * m / (m + 1):.4f})")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
