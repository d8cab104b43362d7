"""Command-line entry point for the full pipeline.

Subcommands: gen-synth, build-dataset, train, eval, ablate, match,
gradcheck. All paths are resolved against --root. Every command that
writes into an output directory echoes its fully resolved configuration
there, and file outputs are byte-reproducible for a fixed seed/config.

Exit codes: 2 for configuration/data problems, 3 for numeric failures;
messages carry a matching `config error:` / `data error:` /
`numeric error:` prefix.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from . import evaluator as ev
from . import plots
from .config import SCHEMA, RunConfig
from .errors import CdcmlError, NumericError, ShapeError
from .gradcheck import run_gradcheck
from .nn import load_checkpoint, save_checkpoint
from .trainer import SplitData, train

PAIR_FILES = {split: f"pairs_{split}.txt" for split in ds.SPLITS}
SPLITS_FILE = "splits.txt"


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            click.echo(f"numeric error: {exc}", err=True)
            sys.exit(3)
        except CdcmlError as exc:
            click.echo(f"{exc.category} error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def schema_option(name: str, flag: str | None = None):
    """A click option backed by a RunConfig schema field.

    The click-side default is None so explicit flags can be told apart
    from omissions; the schema default is shown in the help text.
    """
    field = SCHEMA[name]
    flag = flag or "--" + name.replace("_", "-")
    default = field.default
    if isinstance(default, tuple):
        default = ",".join(str(v) for v in default)
    return click.option(
        flag, name, default=None, help=f"{field.help} [default: {default}]"
    )


def apply_schema_options(fn, names):
    for name in names:  # applied bottom-up, so help lists them in list order
        fn = schema_option(name)(fn)
    return fn


TRAIN_KEYS = [
    "batch_size", "epochs", "base_lr", "lr_decay_factor", "lr_decay_every",
    "seed", "mode", "separate_music_va", "checkpoint_every",
    "alpha", "epsilon", "loss_batch_normalize",
    "embed_dim", "branch_hidden", "sim_hidden", "va_hidden",
    "sim_dropout", "va_dropout", "figures",
]
POLICY_KEYS = [
    "images_per_clip", "n_random", "n_top", "n_bottom", "sample_rate", "seed",
    "ratio_train", "ratio_val", "ratio_test", "sigma_mode", "sigma_samples",
]


def resolve_config(config_path, root: Path, **cli_values) -> RunConfig:
    overrides = {k: v for k, v in cli_values.items() if v is not None}
    path = root / config_path if config_path else None
    return RunConfig.load(config_path=path, overrides=overrides)


@click.group()
@click.option("--root", default=".", show_default=True,
              help="directory that all relative paths are resolved against")
@click.option("--workers", type=int, default=0, show_default=True,
              help="bound internal (BLAS) parallelism; 0 keeps the library default")
@click.pass_context
def main(ctx, root, workers):
    """Emotion-based image-music matching in valence-arousal space."""
    ctx.ensure_object(dict)
    ctx.obj["root"] = Path(root)
    if workers > 0:
        from threadpoolctl import threadpool_limits

        ctx.with_resource(threadpool_limits(limits=workers))


@main.command("gen-synth")
@click.option("--n-images", default=200, show_default=True, help="number of images")
@click.option("--n-music", default=100, show_default=True, help="number of music clips")
@click.option("--image-dim", default=64, show_default=True, help="image feature dimension")
@click.option("--music-dim", default=64, show_default=True, help="music feature dimension")
@click.option("--noise-std", default=0.05, show_default=True,
              help="feature noise standard deviation")
@click.option("--seed", default=0, show_default=True, help="corpus seed")
@click.option("--out", required=True, help="corpus manifest path to write")
@click.pass_context
@handle_errors
def cmd_gen_synth(ctx, n_images, n_music, image_dim, music_dim, noise_std, seed, out):
    """Generate a synthetic corpus with labels recoverable from features."""
    root = ctx.obj["root"]
    corpus = ds.gen_synthetic(n_images, n_music, image_dim, music_dim, noise_std, seed)
    out_path = root / out
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ds.write_corpus(corpus, out_path)
    click.echo(
        f"wrote {out_path}: {n_images} images (dim {image_dim}), "
        f"{n_music} clips (dim {music_dim}), noise_std={noise_std}, seed={seed}"
    )


@main.command("build-dataset")
@click.option("--corpus", "corpus_path", required=True, help="corpus manifest to read")
@click.option("--out", "out_dir", required=True, help="output directory")
@click.option("--config", "config_path", default=None, help="key = value config file")
@click.pass_context
@handle_errors
def cmd_build_dataset(ctx, corpus_path, out_dir, config_path, **cli_values):
    """Split a corpus and generate similarity-labeled pair files."""
    root = ctx.obj["root"]
    cfg = resolve_config(config_path, root, **cli_values)
    corpus = ds.load_corpus(root / corpus_path)
    manifest = ds.split_corpus(
        corpus,
        ratios=cfg.ratios(),
        seed=cfg["seed"],
        sigma_mode=cfg["sigma_mode"],
        sigma_seed=cfg["seed"],
        sigma_samples=cfg["sigma_samples"],
    )
    policy = ds.PairPolicy(
        images_per_clip=cfg["images_per_clip"],
        n_random=cfg["n_random"],
        n_top=cfg["n_top"],
        n_bottom=cfg["n_bottom"],
        sample_rate=cfg["sample_rate"],
        seed=cfg["seed"],
    )
    out = root / out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    ds.write_split_manifest(manifest, out / SPLITS_FILE)

    by_image = corpus.by_id("image")
    by_music = corpus.by_id("music")
    counts = {}
    for split in ds.SPLITS:
        images = [by_image[i] for i in manifest.split_ids(split, "image")]
        music = [by_music[i] for i in manifest.split_ids(split, "music")]
        pairs = ds.generate_pairs(images, music, policy, manifest.sigma)
        ds.write_pairs(pairs, out / PAIR_FILES[split], manifest.sigma.sigma, policy.seed)
        counts[split] = {"images": len(images), "music": len(music), "pairs": len(pairs)}

    click.echo(f"sigma = {manifest.sigma.sigma!r} ({manifest.sigma.provenance.format()})")
    header = f"{'':<12}" + "".join(f"{s:>10}" for s in ds.SPLITS) + f"{'total':>10}"
    click.echo(header)
    for row in ("images", "music", "pairs"):
        cells = [counts[s][row] for s in ds.SPLITS]
        click.echo(f"{row:<12}" + "".join(f"{c:>10}" for c in cells) + f"{sum(cells):>10}")


cmd_build_dataset = apply_schema_options(cmd_build_dataset, POLICY_KEYS)


def load_split_data(root: Path, corpus_path: str, data_dir: str) -> tuple[ds.Corpus, SplitData]:
    corpus = ds.load_corpus(root / corpus_path)
    data = Path(root / data_dir)
    manifest = ds.read_split_manifest(data / SPLITS_FILE, corpus=corpus)
    pairs = {}
    for split, name in PAIR_FILES.items():
        pair_file = ds.read_pairs(data / name)
        if abs(pair_file.sigma - manifest.sigma.sigma) > 1e-12:
            raise ds.DataError(
                f"{name}: sigma {pair_file.sigma!r} does not match the split "
                f"manifest's {manifest.sigma.sigma!r}"
            )
        pairs[split] = pair_file.records
    return corpus, SplitData.build(corpus, manifest, pairs)


def check_model_dims(model, corpus: ds.Corpus) -> None:
    if model.image_branch.input_dim != corpus.image_dim:
        raise ShapeError(
            f"checkpoint tensor image_branch.0.W expects input dim "
            f"{model.image_branch.input_dim}, corpus has {corpus.image_dim}"
        )
    if model.music_branch.input_dim != corpus.music_dim:
        raise ShapeError(
            f"checkpoint tensor music_branch.0.W expects input dim "
            f"{model.music_branch.input_dim}, corpus has {corpus.music_dim}"
        )


@main.command("train")
@click.option("--corpus", "corpus_path", required=True, help="corpus manifest to read")
@click.option("--data", "data_dir", required=True, help="build-dataset output directory")
@click.option("--out", "out_dir", required=True, help="output directory")
@click.option("--config", "config_path", default=None, help="key = value config file")
@click.pass_context
@handle_errors
def cmd_train(ctx, corpus_path, data_dir, out_dir, config_path, **cli_values):
    """Train the full model end to end; writes history and checkpoints."""
    root = ctx.obj["root"]
    cfg = resolve_config(config_path, root, **cli_values)
    corpus, data = load_split_data(root, corpus_path, data_dir)
    out = root / out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)

    model, history = train(data, cfg.train_config(), checkpoint_dir=out)
    history.write(out / "history.csv")
    save_checkpoint(model, out / "final.ckpt")
    if cfg["figures"]:
        plots.history_figure(history, out / "history.png")
    last = history.records[-1]
    click.echo(
        f"trained {cfg['epochs']} epochs; final val_sim_mse={last['val_sim_mse']!r}"
    )
    click.echo(f"wrote {out / 'history.csv'} and {out / 'final.ckpt'}")


cmd_train = apply_schema_options(cmd_train, TRAIN_KEYS)


@main.command("eval")
@click.option("--checkpoint", required=True, help="checkpoint file to evaluate")
@click.option("--corpus", "corpus_path", required=True, help="corpus manifest to read")
@click.option("--data", "data_dir", required=True, help="build-dataset output directory")
@click.option("--split", default="test", show_default=True,
              type=click.Choice(ds.SPLITS), help="split to evaluate")
@click.option("--out", "out_dir", default=None, help="optional output directory")
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="render figures next to the delimited output")
@click.pass_context
@handle_errors
def cmd_eval(ctx, checkpoint, corpus_path, data_dir, split, out_dir, figures):
    """Evaluate a checkpoint on one split; prints a metrics table."""
    root = ctx.obj["root"]
    corpus, data = load_split_data(root, corpus_path, data_dir)
    model = load_checkpoint(root / checkpoint)
    check_model_dims(model, corpus)
    report = ev.evaluate(model, data, split)
    click.echo(ev.EvalReport.csv_header())
    click.echo(report.csv_row())
    if out_dir is not None:
        out = root / out_dir
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(
            ev.EvalReport.csv_header() + "\n" + report.csv_row() + "\n"
        )
        (out / "report.txt").write_text(report.to_text())
        if figures:
            pairs = data.pairs[split]
            items = data.items[split]
            pred_sim = model.predict_similarity(
                items["image"].features[pairs.image_rows],
                items["music"].features[pairs.music_rows],
            )
            pred_va = {m: model.predict_va(items[m].features, m) for m in ("image", "music")}
            true_va = {m: items[m].labels for m in ("image", "music")}
            plots.eval_figure(
                report, pred_sim, pairs.similarity, pred_va, true_va, out / "eval.png"
            )
        click.echo(f"wrote {out / 'report.csv'}")


def parse_rows_file(path: Path) -> list[dict[str, bool]]:
    rows = []
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        names = [tok.strip().lower() for tok in line.replace(",", " ").split()]
        unknown = [n for n in names if n not in ev.ABLATION_FLAGS]
        if unknown:
            raise ds.ParseError(path, line_no, f"unknown loss flags {unknown}")
        rows.append({flag: flag in names for flag in ev.ABLATION_FLAGS})
    if not rows:
        raise ds.DataError(f"{path}: no ablation rows")
    return rows


@main.command("ablate")
@click.option("--corpus", "corpus_path", required=True, help="corpus manifest to read")
@click.option("--data", "data_dir", required=True, help="build-dataset output directory")
@click.option("--out", "out_dir", required=True, help="output directory")
@click.option("--rows", "rows_path", default=None,
              help="rows file (loss flags per line); omit for the standard five rows")
@click.option("--seeds", default="0,1,2,3,4", show_default=True,
              help="comma-separated training seeds to average over")
@click.option("--split", default="test", show_default=True, type=click.Choice(ds.SPLITS))
@click.option("--config", "config_path", default=None, help="key = value config file")
@click.pass_context
@handle_errors
def cmd_ablate(ctx, corpus_path, data_dir, out_dir, rows_path, seeds, split,
               config_path, **cli_values):
    """Train one model per loss-toggle row per seed and tabulate means."""
    root = ctx.obj["root"]
    cfg = resolve_config(config_path, root, **cli_values)
    corpus, data = load_split_data(root, corpus_path, data_dir)
    rows = (
        parse_rows_file(root / rows_path)
        if rows_path is not None
        else [dict(r) for r in ev.TABLE3_ROWS]
    )
    seed_list = [int(tok) for tok in seeds.replace(",", " ").split()]
    out = root / out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)

    result = ev.run_ablation(data, rows, seed_list, cfg.train_config(), split=split)
    table = ev.ablation_csv(result)
    (out / "ablation.csv").write_text(table)
    if cfg["figures"]:
        plots.ablation_figure(result, out / "ablation.png")
    click.echo(table.rstrip("\n"))
    click.echo(f"wrote {out / 'ablation.csv'}")


cmd_ablate = apply_schema_options(cmd_ablate, TRAIN_KEYS)


@main.command("match")
@click.option("--checkpoint", required=True, help="checkpoint file to rank with")
@click.option("--corpus", "corpus_path", required=True, help="corpus manifest to read")
@click.option("--data", "data_dir", required=True, help="build-dataset output directory")
@click.option("--music-id", required=True, help="clip id to match images against")
@click.option("-k", "--k", default=10, show_default=True, help="ranking depth")
@click.option("--split", default="test", show_default=True,
              type=click.Choice(ds.SPLITS), help="image pool split")
@click.option("--out", "out_dir", default=None, help="optional output directory")
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="render figures next to the delimited output")
@click.pass_context
@handle_errors
def cmd_match(ctx, checkpoint, corpus_path, data_dir, music_id, k, split, out_dir, figures):
    """Rank a split's image pool against one music clip."""
    root = ctx.obj["root"]
    corpus, data = load_split_data(root, corpus_path, data_dir)
    model = load_checkpoint(root / checkpoint)
    check_model_dims(model, corpus)
    by_music = corpus.by_id("music")
    if music_id not in by_music:
        raise ds.DataError(f"unknown music id {music_id!r}")
    clip = by_music[music_id]
    pool = data.items[split]["image"]
    ranked = ev.match_topk(model, clip.features, pool.ids, pool.features, k)
    click.echo("rank,image_id,predicted_similarity")
    lines = []
    for rank, (image_id, sim) in enumerate(ranked, start=1):
        line = f"{rank},{image_id},{sim!r}"
        click.echo(line)
        lines.append(line)
    if out_dir is not None:
        out = root / out_dir
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"match_{music_id}.csv"
        csv_path.write_text("rank,image_id,predicted_similarity\n" + "\n".join(lines) + "\n")
        if figures:
            pos = {pid: i for i, pid in enumerate(pool.ids)}
            ranked_va = np.array([pool.labels[pos[pid]] for pid, _ in ranked])
            plots.match_figure(
                music_id,
                (clip.label.valence, clip.label.arousal),
                pool.labels,
                ranked_va,
                [pid for pid, _ in ranked],
                out / f"match_{music_id}.png",
            )
        click.echo(f"wrote {csv_path}")


@main.command("gradcheck")
@click.option("--trials", default=100, show_default=True, help="random batches per target")
@click.option("--seed", default=0, show_default=True, help="base seed")
@handle_errors
def cmd_gradcheck(trials, seed):
    """Check every loss and layer against central finite differences."""
    results = run_gradcheck(trials=trials, seed=seed)
    failed = []
    for res in results:
        status = "pass" if res.passed else "FAIL"
        click.echo(
            f"{status} {res.target:<12} max rel err {res.max_error:.3e} "
            f"({res.trials} trials)"
        )
        if not res.passed:
            failed.append(res.target)
    if failed:
        raise NumericError(f"gradient check failed for {failed}")
    click.echo("all gradient checks passed (threshold 1e-6)")


if __name__ == "__main__":
    main()
