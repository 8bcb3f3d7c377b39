"""Command line front end: dataset tooling, both training stages, evaluation,
FSM execution, the director service, and the gradient self-check.

Every command is a thin shell over the library; anything it can do, a script
importing `calm` can do identically.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .motion import default_style_suite, inspect_clip, load_dataset, \
    save_dataset, STYLE_GAITS


def _load_pretrain(path):
    from .pretrain import load_bundle
    try:
        return load_bundle(path)
    except Exception as e:
        raise click.ClickException(f"cannot load checkpoint {path}: {e}")


def _load_hl(path):
    from .hlc import load_hl_bundle
    try:
        return load_hl_bundle(path)
    except Exception as e:
        raise click.ClickException(f"cannot load high-level checkpoint {path}: {e}")


def _load_data(path):
    if path is None:
        return default_style_suite(0)
    try:
        return load_dataset(path)
    except Exception as e:
        raise click.ClickException(f"cannot load dataset {path}: {e}")


@click.group()
def main():
    """Adversarial latent motion control on a planar character."""


# ---------------------------------------------------------------------------
# Dataset tooling.

@main.group()
def data():
    """Generate and inspect motion clip datasets."""


@data.command("gen")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--styles", default=None,
              help="Comma-separated style names (default: all).")
@click.option("--clips-per-style", default=3, show_default=True, type=int)
def data_gen(out, seed, styles, clips_per_style):
    """Write the procedural style suite as a clip directory."""
    names = styles.split(",") if styles else None
    try:
        ds = default_style_suite(seed, names, clips_per_style)
    except ValueError as e:
        raise click.ClickException(str(e))
    save_dataset(ds, out)
    click.echo(f"wrote {len(ds.clips)} clips "
               f"({len(set(c.style_label for c in ds.clips))} styles) to {out}")


@data.command("inspect")
@click.option("--path", required=True, type=click.Path(exists=True),
              help="A .clip file or a dataset directory.")
def data_inspect(path):
    """Print clip headers and per-channel statistics."""
    p = Path(path)
    files = sorted(p.glob("*.clip")) if p.is_dir() else [p]
    if not files:
        raise click.ClickException(f"no .clip files under {p}")
    for f in files:
        info = inspect_clip(f)
        click.echo(f"{f.name}: v{info['version']} frames={info['n_frames']} "
                   f"dt={info['dt']} duration={info['duration']:.2f}s")
        for ch, st in info["channel_stats"].items():
            click.echo(f"  {ch:>12}  min={st['min']:+.3f}  "
                       f"max={st['max']:+.3f}  mean={st['mean']:+.3f}")


# ---------------------------------------------------------------------------
# Training.

@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True))
@click.option("--styles", default=None,
              help="Styles for the stock suite when --data is not given.")
@click.option("--steps", default=500_000, show_default=True, type=int)
@click.option("--latent-dim", default=64, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--no-negatives", is_flag=True,
              help="Ablation: drop the encoded-negatives discriminator term.")
@click.option("--no-regularizers", is_flag=True,
              help="Ablation: drop the encoder alignment/uniformity terms.")
@click.option("--resume", default=None, type=click.Path(exists=True))
def pretrain(out, data_dir, styles, steps, latent_dim, seed, no_negatives,
             no_regularizers, resume):
    """Jointly train encoder, low-level policy, and discriminator."""
    from .pretrain import PretrainConfig, pretrain as run
    from .service import configure_logging
    configure_logging()
    if data_dir:
        ds = _load_data(data_dir)
    else:
        names = styles.split(",") if styles else None
        ds = default_style_suite(seed, names)
    cfg = PretrainConfig(latent_dim=latent_dim, total_steps=steps, seed=seed,
                         use_negatives=not no_negatives,
                         use_regularizers=not no_regularizers)
    result = run(cfg, ds, out, resume=resume)
    click.echo(json.dumps(result, indent=2))


@main.command("train-hlc")
@click.option("--pretrain", "pretrain_path", required=True,
              type=click.Path(exists=True), help="Frozen low-level checkpoint.")
@click.option("--out", required=True, type=click.Path())
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True))
@click.option("--mode", default="heading", show_default=True,
              type=click.Choice(["heading", "location", "reach", "strike", "block"]))
@click.option("--styles", default="run,walk,crouch_walk", show_default=True)
@click.option("--steps", default=300_000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--resume", default=None, type=click.Path(exists=True))
def train_hlc(pretrain_path, out, data_dir, mode, styles, steps, seed, resume):
    """Train a high-level policy over the frozen low-level stack."""
    from .hlc import HlcConfig, train_highlevel
    from .service import configure_logging
    configure_logging()
    bundle = _load_pretrain(pretrain_path)
    ds = _load_data(data_dir)
    cfg = HlcConfig(mode=mode, styles=tuple(styles.split(",")),
                    total_hl_steps=steps, seed=seed)
    result = train_highlevel(cfg, bundle, ds, out, resume=resume)
    click.echo(json.dumps(result, indent=2))


# ---------------------------------------------------------------------------
# Evaluation.

@main.command("eval")
@click.option("--pretrain", "pretrain_path", required=True,
              type=click.Path(exists=True))
@click.option("--hl", "hl_path", default=None, type=click.Path(exists=True))
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(),
              help="Write the full report as JSON.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--rollouts", default=120, show_default=True, type=int)
@click.option("--refs", default=40, show_default=True, type=int)
def eval_cmd(pretrain_path, hl_path, data_dir, out, seed, rollouts, refs):
    """Latent-space and generation metrics for a trained stack."""
    from .metrics import controllability, fisher_concentration, \
        random_latent_inception, train_window_classifier
    bundle = _load_pretrain(pretrain_path)
    ds = _load_data(data_dir)
    report = {"checkpoint": str(pretrain_path),
              "fingerprint": bundle.fingerprint}

    report["fisher"] = fisher_concentration(bundle.encoder, ds)
    click.echo(f"fisher_concentration      {report['fisher']:.4f}")

    clf = train_window_classifier(ds)
    report["classifier_holdout"] = clf.held_out_accuracy
    click.echo(f"classifier_holdout_acc    {clf.held_out_accuracy:.4f}")

    rng = np.random.default_rng(seed)
    report["controllability"] = controllability(
        bundle.encoder, bundle.policy, clf, ds, n_refs=refs, rng=rng)
    click.echo(f"controllability           {report['controllability']:.4f}")

    is_mean, is_std = random_latent_inception(
        bundle.cfg.latent_dim, bundle.policy, clf, ds,
        n_rollouts=rollouts, rng=np.random.default_rng(seed + 1))
    report["inception_score"] = {"mean": is_mean, "std": is_std}
    click.echo(f"inception_score           {is_mean:.3f} +/- {is_std:.3f}")

    if hl_path:
        from .hlc import evaluate_heading
        hl = _load_hl(hl_path)
        hl.verify_frozen(bundle)
        heading = evaluate_heading(hl, bundle, ds, clf=clf, seed=seed)
        report["heading"] = heading
        click.echo(f"heading_cosine            {heading['mean_cosine']:.4f}")
        if heading.get("style_accuracy") is not None:
            click.echo(f"heading_style_accuracy    {heading['style_accuracy']:.4f}")

    if out:
        Path(out).write_text(json.dumps(report, indent=2))
        click.echo(f"report written to {out}")


# ---------------------------------------------------------------------------
# FSM execution.

@main.command("run-fsm")
@click.option("--pretrain", "pretrain_path", required=True,
              type=click.Path(exists=True))
@click.option("--hl", "hl_path", default=None, type=click.Path(exists=True))
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True))
@click.option("--doc", default=None, type=click.Path(exists=True),
              help="FSM document; omit with --stock for a built-in one.")
@click.option("--stock", default=None,
              type=click.Choice(["location", "strike", "teaser"]))
@click.option("--bind", "binds", multiple=True, metavar="NAME=X,Y",
              help="Target binding, repeatable.")
@click.option("--ticks", default=360, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--trace", default=None, type=click.Path(),
              help="Write the episode trace as JSONL.")
def run_fsm_cmd(pretrain_path, hl_path, data_dir, doc, stock, binds, ticks,
                seed, trace):
    """Execute an FSM document over frozen checkpoints."""
    from .fsm import parse_fsm, run_fsm, FsmParseError, STOCK_FSM_TEXTS
    if (doc is None) == (stock is None):
        raise click.UsageError("exactly one of --doc or --stock is required")
    text = Path(doc).read_text() if doc else STOCK_FSM_TEXTS[stock]()
    bundle = _load_pretrain(pretrain_path)
    hl = _load_hl(hl_path) if hl_path else None
    ds = _load_data(data_dir)
    try:
        spec = parse_fsm(text, {c.style_label for c in ds.clips})
    except FsmParseError as e:
        for line, msg in e.errors:
            click.echo(f"line {line}: {msg}", err=True)
        raise click.ClickException("invalid fsm document")
    bindings = {}
    for b in binds:
        try:
            name, xy = b.split("=", 1)
            x, y = (float(v) for v in xy.split(","))
        except ValueError:
            raise click.ClickException(f"bad --bind {b!r}; expected NAME=X,Y")
        bindings[name] = np.array([x, y])
    try:
        episode = run_fsm(spec, bundle, hl, ds, bindings, ticks, seed=seed)
    except ValueError as e:
        raise click.ClickException(str(e))
    last = episode.records[-1]
    click.echo(f"fsm {spec.name!r}: {ticks} ticks, visited "
               f"{' -> '.join(episode.visited_states)}")
    click.echo(f"final state {last['state']!r} at "
               f"({last['root'][0]:+.2f}, {last['root'][1]:+.2f})")
    for tr in episode.transitions:
        click.echo(f"  tick {tr['tick']:>4}  {tr['from']} -> {tr['to']} "
                   f"({tr['predicate']})")
    if trace:
        episode.write_jsonl(trace)
        click.echo(f"trace written to {trace}")


# ---------------------------------------------------------------------------
# Service and self-check.

@main.command()
@click.option("--pretrain", "pretrain_path", required=True,
              type=click.Path(exists=True))
@click.option("--hl", "hl_path", default=None, type=click.Path(exists=True))
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--tick-rate", default=30.0, show_default=True, type=float)
@click.option("--fast", is_flag=True, help="Run ticks flat out (no pacing).")
def serve(pretrain_path, hl_path, data_dir, host, port, tick_rate, fast):
    """Run the interactive director websocket service."""
    from .service import serve as run, SessionConfig
    cfg = SessionConfig(pretrain=pretrain_path, hl=hl_path, data=data_dir,
                        tick_rate=tick_rate, host=host, port=port, fast=fast)
    try:
        run(cfg)
    except Exception as e:
        raise click.ClickException(f"service failed to start: {e}")


@main.command("grad-check")
@click.option("--probes", default=25, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def grad_check(probes, seed):
    """Finite-difference audit of every differentiable module."""
    from .gradcheck import run_suite, TOLERANCE
    report = run_suite(probes=probes, seed=seed)
    for name, err in sorted(report["entries"].items()):
        flag = "ok" if err < TOLERANCE else "FAIL"
        click.echo(f"{name:<24} max_rel_error {err:.3e}  {flag}")
    click.echo(f"worst {report['worst']:.3e} over {len(report['entries'])} "
               f"modules in {report['elapsed']:.2f}s (tolerance {TOLERANCE:g})")
    sys.exit(0 if report["ok"] else 1)
