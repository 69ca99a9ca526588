"""Regenerate the bundled desk-scale meshes in meshes/."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from solidfv.meshgen import box_mesh, l_bracket_mesh  # noqa: E402
from solidfv.output import write_msh  # noqa: E402


def main() -> None:
    out = os.path.join(os.path.dirname(__file__), "..", "meshes")
    os.makedirs(out, exist_ok=True)

    slab = box_mesh(24, 4, 4, (0.06, 0.01, 0.01))
    write_msh(slab, os.path.join(out, "slab.msh"))
    print(f"slab.msh: {slab.n_cells} cells")

    cavity = box_mesh(8, 8, 8, (0.01, 0.01, 0.01))
    write_msh(cavity, os.path.join(out, "cavity.msh"))
    print(f"cavity.msh: {cavity.n_cells} cells")

    bracket = l_bracket_mesh(6, 2, 2, 0.03, 0.01, 0.01)
    write_msh(bracket, os.path.join(out, "l_bracket.msh"))
    print(f"l_bracket.msh: {bracket.n_cells} cells")


if __name__ == "__main__":
    main()
