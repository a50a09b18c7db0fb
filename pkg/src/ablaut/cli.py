"""Command-line pipeline: paint, fit, analyze, reconstruct, compare, validate.

Every subcommand reads files named on the command line (falling back to
the shipped Germanic dataset where that makes sense), writes its tables
and figures into --out, and drops a manifest.json recording the package
version, seed, settings, input/output hashes, and any warnings.  Given
identical inputs and seed the outputs are byte-identical; warnings
(R-hat, Pareto k) never change the exit code.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    tomllib = None

import numpy as np

from . import __version__, analysis, datasets, lik, mcmc, model, regime, treeio, validate
from .ctmc import STATE_NAMES
from .model import ModelKind


class CliError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run record: settings, input hashes, output hashes (relative paths)."""

    def __init__(self, command, args, outdir):
        self.outdir = Path(outdir)
        self.data = {
            "command": command,
            "version": __version__,
            "seed": getattr(args, "seed", None),
            "settings": {},
            "inputs": {},
            "outputs": {},
            "warnings": {},
        }

    def setting(self, **kv):
        self.data["settings"].update(kv)

    def input(self, path):
        if path is not None:
            self.data["inputs"][Path(path).name] = _sha256(path)

    def output(self, path):
        rel = Path(path).relative_to(self.outdir)
        self.data["outputs"][str(rel)] = _sha256(path)

    def warn(self, key, value):
        self.data["warnings"][key] = value

    def write(self):
        path = self.outdir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        return path


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_trees(args, manifest):
    if args.trees is None:
        manifest.setting(trees="shipped MCC tree")
        return [datasets.mcc_tree()]
    manifest.input(args.trees)
    return list(treeio.read_tree_sample(args.trees))


def _load_tam(args, manifest):
    if args.tam is None:
        manifest.setting(tam="shipped TAM character")
        return datasets.tam()
    manifest.input(args.tam)
    return regime.read_tam_csv(args.tam)


def _load_data(args, manifest):
    if args.data is None:
        manifest.setting(data="shipped 107-verb character matrix")
        return datasets.characters()
    manifest.input(args.data)
    return lik.read_characters_csv(args.data)


def _load_expert_roots(args, manifest):
    if args.expert_roots is None:
        manifest.setting(expert_roots="shipped expert reconstructions")
        return datasets.expert_roots()
    manifest.input(args.expert_roots)
    return model.read_expert_roots_csv(args.expert_roots)


def _load_painted(args, manifest):
    if args.painted:
        out = []
        for path in args.painted:
            manifest.input(path)
            out.append(regime.read_painted_newick(Path(path).read_text().strip()))
        return out
    # fall back: paint the requested (or shipped) trees with the TAM data
    trees = _load_trees(args, manifest)
    obs = _load_tam(args, manifest)
    painted = []
    for tree in trees:
        rates = regime.fit_binary_mk(tree, obs)
        painted.append(regime.paint_regimes(tree, rates, obs, args.grid,
                                            args.threshold, args.sticky_e))
    manifest.setting(painted="painted on the fly", grid=args.grid,
                     threshold=args.threshold, sticky_e=bool(args.sticky_e))
    return painted


def _sampler_config(args):
    return mcmc.SamplerConfig(
        iterations=args.iterations, warmup=args.warmup, chains=args.chains,
        seed=args.seed, target_accept=args.target_accept,
        n_processes=args.threads, block_mode=args.block_mode)


def _root_prior(args):
    return lik.uniform_root_prior(include_dead=not args.living_root_prior)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_paint(args):
    out = _outdir(args)
    manifest = Manifest("paint", args, out)
    trees = _load_trees(args, manifest)
    obs = _load_tam(args, manifest)
    manifest.setting(grid=args.grid, threshold=args.threshold,
                     sticky_e=bool(args.sticky_e))
    prob_rows = []
    for t, tree in enumerate(trees):
        missing = [lb for lb in tree.tip_labels() if lb not in obs.states]
        if missing:
            raise CliError(f"TAM file lacks taxa present in tree {t}: {missing}")
        rates = regime.fit_binary_mk(tree, obs)
        painted = regime.paint_regimes(tree, rates, obs, args.grid,
                                       args.threshold, args.sticky_e)
        path = out / f"painted-{t:03d}.nwk"
        path.write_text(regime.write_painted_newick(painted) + "\n")
        manifest.output(path)
        painter = regime._Painter(tree, rates, obs)
        fractions = np.linspace(0.0, 1.0, 11)
        for v in range(tree.n_nodes):
            if v == tree.root:
                continue
            probs = painter.marginals(v, fractions)
            label = tree.labels[v] or f"node{v}"
            for f, p in zip(fractions, probs):
                prob_rows.append([t, v, label, f"{f:.2f}", repr(float(p))])
    prob_path = out / "regime_probabilities.csv"
    _write_csv(prob_path, ["tree", "node", "label", "fraction", "p_extended"], prob_rows)
    manifest.output(prob_path)
    manifest.write()
    return 0


def cmd_fit(args):
    out = _outdir(args)
    manifest = Manifest("fit", args, out)
    kind = ModelKind(args.kind)
    data = _load_data(args, manifest)
    painted = _load_painted(args, manifest)
    if kind is ModelKind.ANCESTRY_CONSTRAINED:
        roots = _load_expert_roots(args, manifest)
        pairs = [model.constrain_root(p, data, roots, args.epsilon) for p in painted]
        painted = [p for p, _ in pairs]
        data = pairs[0][1]   # augmented identically for every tree
        manifest.setting(epsilon=args.epsilon or "1e-6 x tree height")
    cfg = _sampler_config(args)
    manifest.setting(kind=kind.value, iterations=cfg.iterations, warmup=cfg.warmup,
                     chains=cfg.chains, trees=len(painted),
                     parameters=model.expected_parameter_count(
                         kind, data.n_verbs if kind is not ModelKind.FLAT else 0))
    pool = mcmc.sample(kind, data, painted, cfg, root_prior=_root_prior(args),
                       store_dir=str(out / "draws"))
    for name in ("draws.npy", "pointwise.npy", "logpost.npy", "manifest.json",
                 "tree_ids.npy", "chain_ids.npy"):
        manifest.output(out / "draws" / name)
    watch = [n for n in pool.param_names
             if n == "log_delta" or n.startswith("mu[")]
    table = mcmc.rhat_table(pool, watch)
    rhat_path = out / "rhat.csv"
    _write_csv(rhat_path, ["parameter", "rhat", "zero_variance"],
               [[n, repr(v), int(flag)] for n, (v, flag) in table.items()])
    manifest.output(rhat_path)
    if "rhat_warnings" in pool.meta:
        manifest.warn("rhat", pool.meta["rhat_warnings"])
    manifest.write()
    return 0


def cmd_analyze(args):
    out = _outdir(args)
    manifest = Manifest("analyze", args, out)
    pool = mcmc.load_pool(args.fit)
    manifest.setting(fit=str(args.fit), levels=list(args.levels))
    summary = analysis.regime_differences(pool, levels=tuple(args.levels))
    rows = []
    report = {"n_excluded": summary.n_excluded, "levels": {}}
    for level in args.levels:
        level_block = {}
        for name in analysis.QUANTITIES:
            bounds = summary.hdis[level][name]
            flags = summary.decisive[level][name]
            level_block[name] = {}
            for s, state in enumerate(summary.states):
                lo, hi = float(bounds[s, 0]), float(bounds[s, 1])
                rows.append([state, name, level, repr(lo), repr(hi), int(flags[s])])
                level_block[name][state] = {"lo": lo, "hi": hi,
                                            "decisive": bool(flags[s])}
        report["levels"][str(level)] = level_block
    csv_path = out / "differences.csv"
    _write_csv(csv_path, ["state", "quantity", "level", "lo", "hi", "decisive"], rows)
    json_path = out / "differences.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    manifest.output(csv_path)
    manifest.output(json_path)
    if summary.n_excluded:
        manifest.warn("excluded_draws", summary.n_excluded)
    if not args.no_svg:
        from . import plots
        svg = out / "differences.svg"
        plots.regime_difference_plot(summary, svg, level=max(args.levels))
        manifest.output(svg)
    manifest.write()
    return 0


def cmd_reconstruct(args):
    out = _outdir(args)
    manifest = Manifest("reconstruct", args, out)
    pool = mcmc.load_pool(args.fit)
    data = _load_data(args, manifest)
    painted = _load_painted(args, manifest)
    if len(painted) != 1:
        raise CliError("reconstruction expects exactly one painted tree")
    expert = _load_expert_roots(args, manifest)
    recon = analysis.reconstruct_all_roots(pool, data, painted[0], seed=args.seed,
                                           root_prior=_root_prior(args))
    rows, correct, tied = [], 0, 0
    for r in recon:
        want = expert.get(r.verb)
        hit = want is not None and r.modal_state == want
        correct += int(hit)
        tied += int(r.tied)
        rows.append([r.verb, STATE_NAMES[r.modal_state],
                     "" if want is None else STATE_NAMES[want],
                     int(hit), int(r.tied)]
                    + [repr(float(f)) for f in r.frequencies])
    csv_path = out / "reconstruction.csv"
    _write_csv(csv_path,
               ["verb", "modal", "expert", "correct", "tied"] + list(STATE_NAMES),
               rows)
    accuracy = correct / len(recon)
    json_path = out / "accuracy.json"
    json_path.write_text(json.dumps(
        {"n_verbs": len(recon), "correct": correct, "accuracy": accuracy,
         "ties": tied}, indent=2, sort_keys=True))
    manifest.output(csv_path)
    manifest.output(json_path)
    if not args.no_svg:
        from . import plots
        svg = out / "reconstruction.svg"
        plots.reconstruction_plot(recon, STATE_NAMES, svg)
        manifest.output(svg)
    manifest.write()
    return 0


def cmd_compare(args):
    out = _outdir(args)
    manifest = Manifest("compare", args, out)
    pool_a = mcmc.load_pool(args.fit_a)
    pool_b = mcmc.load_pool(args.fit_b)
    manifest.setting(fit_a=str(args.fit_a), fit_b=str(args.fit_b))
    if pool_a.verb_ids != pool_b.verb_ids:
        raise CliError("fits cover different verb sets; cannot compare")
    loo_a = analysis.psis_loo(pool_a.pointwise)
    loo_b = analysis.psis_loo(pool_b.pointwise)
    delta, se = analysis.compare(loo_a, loo_b)
    rows = [[v, repr(float(loo_a.pointwise[i])), repr(float(loo_b.pointwise[i])),
             repr(float(loo_a.k_hat[i])), repr(float(loo_b.k_hat[i]))]
            for i, v in enumerate(pool_a.verb_ids)]
    csv_path = out / "loo_pointwise.csv"
    _write_csv(csv_path, ["verb", "elpd_a", "elpd_b", "k_hat_a", "k_hat_b"], rows)
    result = {
        "elpd_a": loo_a.elpd, "se_a": loo_a.se,
        "elpd_b": loo_b.elpd, "se_b": loo_b.se,
        "delta_elpd": delta, "se_delta": se,
        "decisive": bool(abs(delta) > 2 * se),
    }
    json_path = out / "comparison.json"
    json_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    manifest.output(csv_path)
    manifest.output(json_path)
    high_k = [pool_a.verb_ids[i] for i in range(len(pool_a.verb_ids))
              if np.isfinite(loo_a.k_hat[i]) and loo_a.k_hat[i] > 0.7]
    if high_k:
        manifest.warn("pareto_k_above_0.7", high_k)
    manifest.write()
    return 0


def cmd_validate(args):
    out = _outdir(args)
    manifest = Manifest("validate", args, out)
    if args.trees is None:
        sample = datasets.tree_sample()
        trees = list(sample)[:args.sim_trees]
        manifest.setting(trees=f"first {args.sim_trees} shipped sample trees")
    else:
        manifest.input(args.trees)
        trees = list(treeio.read_tree_sample(args.trees))[:args.sim_trees]
    obs = _load_tam(args, manifest)
    painted = []
    for tree in trees:
        rates = regime.fit_binary_mk(tree, obs)
        painted.append(regime.paint_regimes(tree, rates, obs, args.grid))
    multipliers = {}
    if args.abb_effect is not None:
        from .ctmc import PatternState
        multipliers = {int(PatternState.ABB): args.abb_effect}
    cfg = validate.SimConfig(
        n_verbs=args.n_verbs, hyper_mu=args.hyper_mu, hyper_sigma=args.hyper_sigma,
        death=args.death, seed=args.seed, hdi_levels=tuple(args.levels),
        e_exit_multipliers=multipliers)
    sampler = _sampler_config(args)
    manifest.setting(n_verbs=args.n_verbs, trees=len(painted),
                     iterations=args.iterations, warmup=args.warmup,
                     chains=args.chains, abb_effect=args.abb_effect)
    result = validate.false_positive_study(cfg, painted, sampler)
    rows = [[c.tree_index, c.state, c.level, int(c.decisive),
             repr(c.interval[0]), repr(c.interval[1])] for c in result.cells]
    csv_path = out / "study_cells.csv"
    _write_csv(csv_path, ["tree", "state", "level", "decisive", "lo", "hi"], rows)
    json_path = out / "study_rates.json"
    json_path.write_text(json.dumps(
        {str(level): rate for level, rate in result.fp_rate.items()},
        indent=2, sort_keys=True))
    manifest.output(csv_path)
    manifest.output(json_path)
    if result.rhat_warnings:
        manifest.warn("rhat", result.rhat_warnings)
    manifest.write()
    return 0


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TOML file of defaults (flags win)")


def _add_paint_inputs(p):
    p.add_argument("--trees", help="Newick file, one tree per line (default: shipped MCC)")
    p.add_argument("--tam", help="taxon,state CSV (default: shipped)")
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sticky-e", action="store_true",
                   help="E persists once entered (no reversals)")


def _add_sampler(p):
    p.add_argument("--iterations", type=int, default=4000)
    p.add_argument("--warmup", type=int, default=2000)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--target-accept", type=float, default=0.3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--block-mode", choices=("row", "regime"), default="row")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ablaut",
        description="Regime-dependent CTM evolution of verb stem-alternation "
                    "patterns on timed phylogenies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("paint", help="fit the TAM character and paint regimes")
    _add_common(p)
    _add_paint_inputs(p)
    p.set_defaults(func=cmd_paint)

    p = sub.add_parser("fit", help="sample the posterior of a model")
    _add_common(p)
    _add_paint_inputs(p)
    p.add_argument("--kind", choices=[k.value for k in ModelKind], required=True)
    p.add_argument("--data", help="verb,taxa... character CSV (default: shipped)")
    p.add_argument("--painted", nargs="+",
                   help="painted Newick files (default: paint --trees on the fly)")
    p.add_argument("--expert-roots", help="verb,state CSV for the constrained model")
    p.add_argument("--epsilon", type=float, help="pseudo-branch length")
    p.add_argument("--living-root-prior", action="store_true",
                   help="uniform root prior over living states only")
    _add_sampler(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("analyze", help="regime differences with HDIs")
    _add_common(p)
    p.add_argument("--fit", required=True, help="draw-store directory from 'fit'")
    p.add_argument("--levels", type=float, nargs="+", default=[0.95])
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("reconstruct", help="ancestral root states per verb")
    _add_common(p)
    _add_paint_inputs(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--data")
    p.add_argument("--painted", nargs="+")
    p.add_argument("--expert-roots")
    p.add_argument("--living-root-prior", action="store_true")
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("compare", help="PSIS-LOO comparison of two fits")
    _add_common(p)
    p.add_argument("--fit-a", required=True)
    p.add_argument("--fit-b", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="simulation-based false-positive study")
    _add_common(p)
    p.add_argument("--trees")
    p.add_argument("--tam")
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--sim-trees", type=int, default=5)
    p.add_argument("--n-verbs", type=int, default=20)
    p.add_argument("--hyper-mu", type=float, default=0.5)
    p.add_argument("--hyper-sigma", type=float, default=0.1)
    p.add_argument("--death", type=float, default=0.05)
    p.add_argument("--levels", type=float, nargs="+", default=[0.89, 0.95, 0.99])
    p.add_argument("--abb-effect", type=float,
                   help="multiply E-regime ABB exit rates (power check)")
    _add_sampler(p)
    p.set_defaults(func=cmd_validate)
    return parser


def _parse_toml(path):
    """Config tables; tomllib when available, else a same-shape subset
    parser ([section] headers, key = string/number/bool) for Python 3.10."""
    if tomllib is not None:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    table = {}
    current = table
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = table.setdefault(line[1:-1].strip(), {})
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            value = value.strip()
            if value.startswith(("'", '"')):
                parsed = value[1:-1]
            elif value in ("true", "false"):
                parsed = value == "true"
            else:
                try:
                    parsed = int(value)
                except ValueError:
                    try:
                        parsed = float(value)
                    except ValueError:
                        raise CliError(f"{path}:{lineno}: cannot parse {value!r}") from None
            current[key.strip()] = parsed
    return table


def _apply_config(args, argv):
    if not getattr(args, "config", None):
        return args
    table = _parse_toml(args.config)
    section = table.get(args.command, {k: v for k, v in table.items()
                                       if not isinstance(v, dict)})
    provided = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    for key, value in section.items():
        dest = key.replace("-", "_")
        flag = "--" + key.replace("_", "-")
        if flag in provided or not hasattr(args, dest):
            continue
        setattr(args, dest, value)
    return args


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config(args, argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
