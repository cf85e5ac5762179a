#!/usr/bin/env python3
"""
validate_setup.py — Validate the environment before running fokkerid.

Checks:
1. Required Python packages are installed
2. The mesh cache directory is writable
3. A level-2 icosphere satisfies the mesh invariants
4. A short forward solve conserves mass
"""

import os
import sys
import tempfile

from dotenv import load_dotenv, find_dotenv

# Minimum versions the numerics were written against
REQUIRED_PACKAGES = [
    ("numpy", "numpy", (1, 24)),
    ("scipy", "scipy", (1, 10)),
    ("dotenv", "python-dotenv", None),
    ("pytest", "pytest", None),
]


def print_ok(msg: str) -> None:
    print(f"  ✓ {msg}")


def print_fail(msg: str) -> None:
    print(f"  ✗ {msg}")


def print_warn(msg: str) -> None:
    print(f"  ⚠ {msg}")


def _version_tuple(version: str) -> tuple[int, ...]:
    parts = []
    for piece in version.split(".")[:2]:
        digits = "".join(ch for ch in piece if ch.isdigit())
        parts.append(int(digits) if digits else 0)
    return tuple(parts)


def check_dependencies() -> bool:
    """Check that required Python packages are installed with usable versions."""
    print("\n[1/4] Checking Python dependencies...")

    all_ok = True
    for module_name, package_name, minimum in REQUIRED_PACKAGES:
        try:
            module = __import__(module_name)
        except ImportError:
            print_fail(f"{package_name} is not installed. Run: pip install {package_name}")
            all_ok = False
            continue
        version = getattr(module, "__version__", "unknown")
        if minimum and version != "unknown" and _version_tuple(version) < minimum:
            print_fail(f"{package_name} {version} is too old (need >= {'.'.join(map(str, minimum))})")
            all_ok = False
        else:
            print_ok(f"{package_name} {version}")
    return all_ok


def check_cache_dir() -> bool:
    """Check that the mesh cache directory can be created and written."""
    print("\n[2/4] Checking mesh cache directory...")

    from geometry import mesh_cache_dir

    cache_dir = mesh_cache_dir()
    source = "FOKKERID_CACHE_DIR" if os.getenv("FOKKERID_CACHE_DIR") else "default"
    try:
        cache_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=cache_dir, prefix=".write_test_", delete=True):
            pass
        print_ok(f"{cache_dir} is writable ({source})")
        return True
    except OSError as e:
        print_fail(f"Cannot write to {cache_dir}: {e}")
        print("    Hint: set FOKKERID_CACHE_DIR in .env to a writable directory.")
        return False


def check_mesh() -> bool:
    """Check triangle count, total area and edge pairing of a level-2 icosphere."""
    print("\n[3/4] Checking icosphere invariants (level 2)...")

    try:
        import numpy as np
        from geometry import build_icosphere

        mesh = build_icosphere(2)
        ok = True
        if len(mesh.triangles) == 320:
            print_ok("320 triangles")
        else:
            print_fail(f"{len(mesh.triangles)} triangles, expected 320")
            ok = False
        area_error = abs(mesh.total_area - 4.0 * np.pi)
        if area_error < 1e-10:
            print_ok(f"total area 4π (error {area_error:.1e})")
        else:
            print_fail(f"total area off by {area_error:.3e}")
            ok = False
        edges = mesh.edges
        per_cell = np.bincount(np.concatenate([edges.left, edges.right]), minlength=mesh.n_cells)
        if edges.count == 3 * mesh.n_cells // 2 and np.all(per_cell == 3):
            print_ok(f"{edges.count} edges, each shared by two triangles")
        else:
            print_fail("mesh is not watertight")
            ok = False
        return ok
    except Exception as e:
        print_fail(f"Mesh construction failed: {e}")
        return False


def check_forward_solve() -> bool:
    """Run a short uniform-start forward solve and check mass conservation."""
    print("\n[4/4] Checking forward solve...")

    try:
        import numpy as np
        from geometry import assemble_operators, build_icosphere
        from model import FieldWaveform, PhysicalConstants, TimeGrid, assemble_drift
        from pde import solve_forward, uniform_density

        constants = PhysicalConstants()
        mesh = build_icosphere(2)
        operators = assemble_operators(mesh, constants.lam)
        grid = TimeGrid(1e-8, 10)
        field = FieldWaveform(np.tile([0.01, 0.0, 0.0], (grid.n_samples, 1)))
        state = solve_forward(assemble_drift(field, constants, mesh, grid), uniform_density(mesh), operators, grid)
        drift = float(np.max(np.abs(state.mass() - 1.0)))
        if drift < 1e-8:
            print_ok(f"mass conserved to {drift:.1e}")
            return True
        print_fail(f"mass drifted by {drift:.3e}")
        return False
    except Exception as e:
        print_fail(f"Forward solve failed: {e}")
        return False


def main():
    print("=" * 60)
    print("fokkerid - Environment Validation")
    print("=" * 60)

    load_dotenv(find_dotenv(usecwd=True))
    dotenv_path = find_dotenv(usecwd=True)
    if dotenv_path:
        print(f"\nUsing .env at: {dotenv_path}")

    results = [("Dependencies", check_dependencies())]
    if not results[0][1]:
        print_warn("Skipping numerical checks until dependencies are installed")
    else:
        results.append(("Cache directory", check_cache_dir()))
        results.append(("Mesh invariants", check_mesh()))
        results.append(("Forward solve", check_forward_solve()))

    print("\n" + "=" * 60)
    print("Summary")
    print("=" * 60)

    all_passed = True
    for name, passed in results:
        status = "✓ PASS" if passed else "✗ FAIL"
        print(f"  {status}: {name}")
        if not passed:
            all_passed = False

    print()
    if all_passed:
        print("All checks passed! You're ready to run fokkerid.")
        print("\nNext steps:")
        print("  python cli.py mesh --level 3 4 5")
        print("  python cli.py simulate --preset case1")
        sys.exit(0)
    else:
        print("Some checks failed. Please fix the issues above before proceeding.")
        sys.exit(1)


if __name__ == "__main__":
    main()
