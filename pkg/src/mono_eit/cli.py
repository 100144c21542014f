"""Command line entry point ``mono-eit``.

Every subcommand reads a phantom config, writes its artifacts and a
``manifest.txt`` into ``--out``, and exits with 0 (ok), 2 (config or usage
error), 3 (assumption violation) or 4 (numerical failure). Errors are
reported as one line ``error: <class>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import phantoms as ph
from .coefficients import CoefficientError, MatrixField, RadialShear, save_field
from .fem import NumericalError
from .locpot import (
    LocalizationError,
    energy_form_pair,
    localization_spectrum,
    save_spectrum_csv,
    simultaneous_localization_check,
)
from .mesh import MeshError, rasterize_region, save_mesh
from .monotonicity import (
    cell_mask_to_grid,
    default_tau,
    inner_reconstruction_sweep,
    outer_reconstruction_sweep,
    save_margins_csv,
    save_mask_grid,
    support_hausdorff,
)
from .nd import BasisMismatch, Measurement, save_ndmatrix, save_ndmatrix_binary, save_vector
from .regions import DescriptorError

COMMANDS = ("forward", "reconstruct-outer", "reconstruct-inner", "locpot", "verify-inequalities", "twin-demo")
EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mono-eit", description="Monotonicity-based inclusion reconstruction from ND maps.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="phantom/run config file")
    p.add_argument("--out", default="out", help="artifact directory (default: ./out)")
    p.add_argument("--k", type=int, help="override the basis size K")
    p.add_argument("--tau", type=float, help="override the test tolerance")
    p.add_argument("--seed", type=int, help="override the noise seed")
    return p


class Run:
    """Shared state of one command: config, phantom, timings, manifest."""

    def __init__(self, args):
        self.args = args
        self.t0 = time.perf_counter()
        self.cp = ph.read_config(args.config)
        spec = ph.spec_from_config(self.cp)
        overrides = {}
        if args.k is not None:
            overrides["K"] = args.k
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            from dataclasses import replace

            spec = replace(spec, **overrides)
        if spec.K < 1:
            raise ph.ConfigError("--k must be positive")
        self.spec = spec
        self.out = Path(args.out)
        self.manifest = {
            "command": args.command,
            "config": str(args.config),
            "inputs_hash": ph.inputs_hash(args.config, {"k": args.k, "tau": args.tau, "seed": args.seed}),
            "K": spec.K,
            "noise": spec.noise,
            "seed": spec.seed,
        }
        self.timings = {}
        self._phantom = None
        self._background = None

    def tick(self, name, start):
        self.timings[name] = time.perf_counter() - start

    @property
    def phantom(self) -> ph.Phantom:
        if self._phantom is None:
            t = time.perf_counter()
            self._phantom = ph.build_phantom(self.spec)
            self.tick("t_build", t)
            self.manifest["mesh_id"] = self._phantom.mesh.mesh_id
            self.manifest["n_cells"] = self._phantom.mesh.n_cells
            self.manifest["basis_id"] = self._phantom.basis.basis_id
        return self._phantom

    @property
    def background(self) -> Measurement:
        if self._background is None:
            p = self.phantom
            t = time.perf_counter()
            self._background = Measurement(p.A0, p.mesh, p.basis)
            self.tick("t_background", t)
        return self._background

    def measured(self):
        """ND matrix of ``A_D`` with configured noise, and the tolerance."""
        p = self.phantom
        t = time.perf_counter()
        N = Measurement(p.A_D, p.mesh, p.basis).nd()
        N = ph.add_noise(N, self.spec.noise, self.spec.seed)
        self.tick("t_measure", t)
        return N

    def tau(self, N, section: str | None = None) -> float:
        if self.args.tau is not None:
            tau = self.args.tau
        elif section and self.cp.has_option(section, "tau"):
            tau = float(self.cp[section]["tau"])
        else:
            tau = default_tau(N, self.spec.noise)
        self.manifest["tau"] = tau
        return tau

    def section(self, name):
        return self.cp[name] if self.cp.has_section(name) else {}

    def finish(self):
        self.timings["t_total"] = time.perf_counter() - self.t0
        self.manifest.update(self.timings)
        ph.write_manifest(self.out / "manifest.txt", self.manifest)


def _grid_of(run: Run, mask, grid: int):
    return cell_mask_to_grid(run.phantom.mesh, mask, grid)


def cmd_forward(run: Run):
    p = run.phantom
    N = run.measured()
    save_ndmatrix(N, run.out / "nd.txt")
    save_ndmatrix_binary(N, run.out / "nd.bin")
    save_mesh(p.mesh, run.out / "mesh.txt")
    save_field(p.A_D, run.out / "field_AD.txt")
    save_mask_grid(_grid_of(run, p.D_mask, 32), run.out / "inclusion_mask.txt")
    run.manifest["nd_norm"] = N.norm


def _outer(run: Run, N, background, grid_default=32):
    sec = run.section("outer")
    family = sec.get("family", "halfspace")
    families = ("halfspace", "pixel_exclusion") if family == "both" else (family,)
    p = run.phantom
    tau = run.tau(N, "outer")
    grid = int(sec.get("grid", grid_default))
    results = {}
    for fam in families:
        t = time.perf_counter()
        results[fam] = outer_reconstruction_sweep(
            N,
            p.A0,
            p.spec.bounds,
            p.mesh,
            p.basis,
            family=fam,
            tau=tau,
            variant=sec.get("variant", "linear"),
            n_directions=int(sec.get("directions", 40)),
            resolution=float(sec["resolution"]) if "resolution" in sec else None,
            grid=grid,
            background=background,
        )
        run.tick(f"t_{fam}", t)
    return results, grid


def cmd_reconstruct_outer(run: Run):
    N = run.measured()
    results, grid = _outer(run, N, run.background)
    p = run.phantom
    for fam, res in results.items():
        save_margins_csv(res.margins, run.out / f"margins_{fam}.csv")
        if fam == "halfspace":
            save_mask_grid(_grid_of(run, res.upper_bound, grid), run.out / "upper_bound.txt")
            save_mask_grid(res.upper_bound.data[None, :], run.out / "upper_bound_cells.txt")
            lines = ["direction_x,direction_y,offset"]
            lines += [f"{w[0]!r},{w[1]!r},{s!r}" for w, s in res.cuts]
            (run.out / "cuts.csv").write_text("\n".join(lines) + "\n")
            run.manifest["upper_bound_cells"] = len(res.upper_bound)
            run.manifest["contains_inclusion"] = p.D_mask.issubset(res.upper_bound)
        else:
            save_mask_grid(res.pixel_grid, run.out / "pixel_hits.txt")
            save_mask_grid(res.pixel_hits.data[None, :], run.out / "pixel_hits_cells.txt")
            run.manifest["pixel_hits"] = int(res.pixel_grid.sum())
    run.manifest["family"] = ",".join(results)


def cmd_reconstruct_inner(run: Run):
    p = run.phantom
    N = run.measured()
    sec = run.section("inner")
    tags = {inc.tag for inc in p.spec.inclusions}
    variant = sec.get("variant", "neg" if tags == {"negdef"} else "pos")
    grid = int(sec.get("grid", 24))
    tau = run.tau(N, "inner")
    t = time.perf_counter()
    mask, margins = inner_reconstruction_sweep(
        N,
        p.A0,
        p.spec.bounds,
        p.mesh,
        p.basis,
        variant=variant,
        grid=grid,
        tau=tau,
        radius_factor=float(sec.get("radius_factor", math.sqrt(0.5))),
        background=run.background,
    )
    run.tick("t_inner", t)
    save_mask_grid(_grid_of(run, mask, grid), run.out / "inner_mask.txt")
    save_margins_csv(margins, run.out / "margins_inner.csv")
    run.manifest.update(variant=variant, grid=grid, inner_cells=len(mask))


def cmd_locpot(run: Run):
    p = run.phantom
    sec = run.section("locpot")
    if "b" not in sec or "u" not in sec:
        raise ph.ConfigError("[locpot] needs keys 'b' and 'u'")
    B = rasterize_region(p.mesh, sec["b"])
    U = rasterize_region(p.mesh, sec["u"])
    n = int(sec.get("n", 3))
    Ks = sorted({int(k) for k in sec.get("ks", str(p.spec.K)).replace(",", " ").split()})
    if Ks[-1] > p.spec.K:
        raise ph.ConfigError(f"[locpot] ks exceed K = {p.spec.K}")
    t = time.perf_counter()
    pair = energy_form_pair(p.A0, B, U, p.basis, p.mesh, run.background)
    rows, top = [], None
    for K in Ks:
        spec = localization_spectrum(pair.truncate(K), n)
        rows.append((K, [lam for lam, _ in spec]))
        top = spec[0][1]
    run.tick("t_locpot", t)
    save_spectrum_csv(rows, run.out / "spectrum.csv")
    save_vector(top, run.out / "top_current.txt")
    run.manifest["lambda1"] = rows[-1][1][0]
    if "a2_region" in sec:
        mask = rasterize_region(p.mesh, sec["a2_region"])
        P = ph.parse_matrix(sec.get("a2_perturbation", "1"))
        A2 = MatrixField(p.A0.values + mask.data[:, None, None] * P, p.mesh.mesh_id, "A2")
        rep = simultaneous_localization_check(p.A0, A2, B, U, p.basis, p.mesh, n, Ks)
        lines = ["K,ratio_A1,ratio_A2"]
        lines += [f"{K},{a!r},{b!r}" for K, a, b in zip(Ks, rep.ratios_A1[:, 0], rep.ratios_A2[:, 0])]
        (run.out / "simultaneous.csv").write_text("\n".join(lines) + "\n")
        run.manifest.update(simultaneous_constant=rep.constant, simultaneous_passed=rep.passed)


def _parse_kappa(text: str) -> list[complex]:
    """Whitespace/comma separated Python complex literals, e.g. ``1 -1j 0.92388+0.38268j``."""
    return [complex(tok) for tok in text.replace(",", " ").split()]


def cmd_verify_inequalities(run: Run):
    from .inequalities import verify_general_inequalities
    from .random_fields import FAMILIES, random_pair

    p = run.phantom
    sec = run.section("inequalities")
    try:
        kappas = _parse_kappa(sec.get("kappa", "1"))
    except ValueError:
        raise ph.ConfigError(f"[inequalities] cannot parse kappa {sec.get('kappa')!r}") from None
    trials = int(sec.get("trials", 100))
    pairs = int(sec.get("pairs", 1))
    fams = sec.get("families", " ".join(FAMILIES)).replace(",", " ").split()
    unknown = set(fams) - set(FAMILIES)
    if unknown:
        raise ph.ConfigError(f"[inequalities] unknown families: {', '.join(sorted(unknown))}")
    rng = np.random.default_rng(int(sec.get("seed", run.spec.seed)))
    lines = ["family,pair,kappa,trials,max_violation_lower,max_violation_upper,scale,bracket,status"]
    total = violations = skipped = 0
    t = time.perf_counter()
    for fam in fams:
        for k in range(pairs):
            A1, A2 = random_pair(fam, p.mesh, rng)
            m1, m2 = Measurement(A1, p.mesh, p.basis), Measurement(A2, p.mesh, p.basis)
            for kappa in kappas:
                kstr = f"{kappa.real:.6g}{kappa.imag:+.6g}j"
                try:
                    rep = verify_general_inequalities(
                        A1, A2, kappa, trials, p.mesh, p.basis, int(rng.integers(2**31)), (m1, m2)
                    )
                except CoefficientError:
                    skipped += 1
                    lines.append(f"{fam},{k},{kstr},0,,,,,skipped")
                    continue
                total += trials
                violations += len(rep.failures)
                lines.append(
                    f"{fam},{k},{kstr},{trials},{rep.max_violation_lower!r},{rep.max_violation_upper!r},"
                    f"{rep.scale!r},{rep.bracket_norm!r},{'pass' if rep.passed else 'fail'}"
                )
    run.tick("t_verify", t)
    (run.out / "inequalities.csv").write_text("\n".join(lines) + "\n")
    run.manifest.update(trials_total=total, violations=violations, skipped_combinations=skipped)


def cmd_twin_demo(run: Run):
    p = run.phantom
    sec = run.section("shear")
    phi = RadialShear.cubic(float(sec.get("a", 0.3)), float(sec.get("b", 0.0)), p.spec.radius)
    t = time.perf_counter()
    twin = ph.pushforward_twin(p, phi)
    N_D = Measurement(p.A_D, p.mesh, p.basis).nd()
    N_T = Measurement(twin.A_twin, p.mesh, p.basis).nd()
    run.tick("t_twin", t)
    mismatch = float(np.linalg.norm(N_T.entries - N_D.entries) / np.linalg.norm(N_D.entries))
    save_ndmatrix(N_D, run.out / "nd_phantom.txt")
    save_ndmatrix(N_T, run.out / "nd_twin.txt")
    save_field(twin.A_twin, run.out / "field_twin.txt")
    save_mask_grid(_grid_of(run, p.D_mask, 32), run.out / "inclusion_mask.txt")
    save_mask_grid(_grid_of(run, twin.D_twin_mask, 32), run.out / "twin_inclusion_mask.txt")
    run.manifest["relative_mismatch"] = mismatch
    if run.cp.has_section("outer"):
        noisy_D = ph.add_noise(N_D, run.spec.noise, run.spec.seed)
        noisy_T = ph.add_noise(N_T, run.spec.noise, run.spec.seed)
        res_D, grid = _outer(run, noisy_D, run.background)
        res_T, _ = _outer(run, noisy_T, run.background)
        a, b = res_D["halfspace"], res_T["halfspace"]
        save_mask_grid(_grid_of(run, a.upper_bound, grid), run.out / "upper_bound_phantom.txt")
        save_mask_grid(_grid_of(run, b.upper_bound, grid), run.out / "upper_bound_twin.txt")
        R = p.spec.radius
        run.manifest["upper_bound_hausdorff"] = support_hausdorff(a.polygon(R), b.polygon(R))


HANDLERS = {
    "forward": cmd_forward,
    "reconstruct-outer": cmd_reconstruct_outer,
    "reconstruct-inner": cmd_reconstruct_inner,
    "locpot": cmd_locpot,
    "verify-inequalities": cmd_verify_inequalities,
    "twin-demo": cmd_twin_demo,
}


def _fail(kind: str, code: int, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_CONFIG, exc)
    try:
        run = Run(args)
        run.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](run)
        run.finish()
    except (ph.ConfigError, DescriptorError, MeshError) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except ph.AssumptionViolation as exc:
        return _fail(f"assumption:{exc.clause}", EXIT_ASSUMPTION, exc)
    except (CoefficientError, LocalizationError) as exc:
        return _fail("assumption", EXIT_ASSUMPTION, exc)
    except (NumericalError, BasisMismatch, np.linalg.LinAlgError) as exc:
        return _fail("numerical", EXIT_NUMERICAL, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
