"""Command-line toolchain: feature extraction, training, evaluation,
experiments, and model introspection."""

from __future__ import annotations

import os

import click
import numpy as np

from . import densities as dn
from . import experiments as ex
from . import featgen as fg
from . import featstack as fs
from . import images as im
from . import introspect as ins
from . import metrics as mt
from . import model as md
from .dataset import read_fixation_csv


@click.group()
def main():
    """Probabilistic fixation-prediction toolchain."""


@main.group("featgen")
def featgen():
    """Filter-bank feature extraction."""


@featgen.command("extract")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def featgen_extract(spec_path, images_dir, out_dir):
    """Write one feature-stack file per image in a directory."""
    spec = fg.load_spec(spec_path)
    os.makedirs(out_dir, exist_ok=True)
    paths = im.list_images(images_dir)
    if not paths:
        raise click.ClickException(f"no PNG/PPM images in {images_dir}")
    for path in paths:
        image_id = os.path.splitext(os.path.basename(path))[0]
        stack = fg.extract(im.load_image(path), spec, image_id)
        fs.write_stack(stack, os.path.join(out_dir, image_id + ".fstk"))
        click.echo(f"{image_id}: {stack.n_features} features "
                   f"{stack.height}x{stack.width}")


def _load_stacks(stacks_dir) -> dict[str, fs.FeatureStack]:
    stacks = {}
    for name in sorted(os.listdir(stacks_dir)):
        if name.endswith(".fstk"):
            stack = fs.read_stack(os.path.join(stacks_dir, name))
            stacks[stack.image_id] = stack
    if not stacks:
        raise click.ClickException(f"no .fstk files in {stacks_dir}")
    return stacks


@main.group("introspect")
def introspect_group():
    """Feature-usage analysis of a trained model."""


@introspect_group.command("report")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--stacks", "stacks_dir", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", type=click.Path(exists=True))
@click.option("--fixations", "fix_csv", type=click.Path(exists=True),
              help="Fixation CSV, used for image dimensions.")
@click.option("--top", default=10, show_default=True)
@click.option("--patches", default=9, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def introspect_report(model_path, stacks_dir, images_dir, fix_csv, top, patches, out_dir):
    """Rank features by |weight| and cut their maximum-response patches."""
    model = md.load_model(model_path)
    stacks = _load_stacks(stacks_dir)
    os.makedirs(out_dir, exist_ok=True)
    if fix_csv:
        sizes = read_fixation_csv(fix_csv).image_sizes
    else:
        # fall back to grid-sized images when no dataset is given
        sizes = {i: (s.width, s.height) for i, s in stacks.items()}
    reports = []
    for name in ins.top_features(model, top):
        reports.append(
            ins.feature_report(model, name, list(stacks.values()), sizes, patches)
        )
    ins.write_report_jsonl(reports, os.path.join(out_dir, "features.jsonl"))
    if images_dir:
        _cut_patches(reports, images_dir, out_dir)
    for r in reports:
        click.echo(f"{r.name}: w={r.weight:+.4f} rel={r.relative_weight:.3f} "
                   f"hits={len(r.top_responses)}")


def _cut_patches(reports, images_dir, out_dir) -> None:
    crops_dir = os.path.join(out_dir, "patches")
    os.makedirs(crops_dir, exist_ok=True)
    cache = {}
    for r in reports:
        for rank, hit in enumerate(r.top_responses):
            if hit.image_id not in cache:
                for ext in (".png", ".ppm"):
                    path = os.path.join(images_dir, hit.image_id + ext)
                    if os.path.exists(path):
                        cache[hit.image_id] = im.load_image(path)
                        break
                else:
                    cache[hit.image_id] = None
            image = cache[hit.image_id]
            if image is None:
                continue
            x0, y0, x1, y1 = hit.box
            if x1 > x0 and y1 > y0:
                im.save_png(
                    image[y0:y1, x0:x1],
                    os.path.join(crops_dir, f"{r.name}_{rank}_{hit.image_id}.png"),
                )


@main.command("train")
@click.option("--stacks", "stacks_dir", required=True, type=click.Path(exists=True))
@click.option("--fixations", "fix_csv", required=True, type=click.Path(exists=True))
@click.option("--lam", "--lambda", "lam", default=0.001, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-iterations", default=500, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--trace", "trace_path", type=click.Path())
def train(stacks_dir, fix_csv, lam, seed, max_iterations, out_path, trace_path):
    """Fit one model on all supplied fixations (no cross-validation)."""
    stacks = _load_stacks(stacks_dir)
    dataset = read_fixation_csv(fix_csv)
    ids = [i for i in sorted(stacks) if dataset.fixations_on(i)]
    if not ids:
        raise click.ClickException("no stack has fixations")
    train_stacks = [stacks[i] for i in ids]
    stats = fs.compute_norm_stats(train_stacks)
    norm = {i: fs.normalize(stacks[i], stats) for i in ids}
    grid = (train_stacks[0].height, train_stacks[0].width)
    train_ds = dataset.filter(images=ids)
    priors = ex._loio_priors(train_ds, ids, grid, 32, 0.1)
    config = ex.OptimizerConfig(max_iterations=max_iterations)
    model, trace = ex.fit_model(
        norm, train_ds, train_ds.fixations, priors, lam, stats, config, seed,
        split_desc=f"all {len(ids)} images, all subjects",
    )
    md.save_model(model, out_path)
    if trace_path:
        trace.to_csv(trace_path)
    click.echo(f"trained on {train_ds.n_fixations()} fixations over {len(ids)} images")
    click.echo(f"final cost {trace.rows[-1].total:.5f} after {len(trace.rows)} steps"
               if trace.rows else "start was already optimal")


@main.command("evaluate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--stacks", "stacks_dir", required=True, type=click.Path(exists=True))
@click.option("--fixations", "fix_csv", required=True, type=click.Path(exists=True))
@click.option("--gold-bandwidth", type=float, default=None,
              help="Gold-standard KDE bandwidth in grid cells (default: select by CV).")
@click.option("--kde-bandwidth", default=8.0, show_default=True,
              help="Nonparametric-prior bandwidth in the normalized 100x100 frame.")
@click.option("--out", "out_csv", type=click.Path())
def evaluate(model_path, stacks_dir, fix_csv, gold_bandwidth, kde_bandwidth, out_csv):
    """Score a model: log-likelihood, information gain, AUC and shuffled AUC.

    Prints both saliency-map conventions side by side: AUC uses
    nonparametric-prior maps, shuffled AUC uniform-prior maps.
    """
    model = md.load_model(model_path)
    stacks = _load_stacks(stacks_dir)
    dataset = read_fixation_csv(fix_csv)
    ids = [i for i in sorted(stacks) if dataset.fixations_on(i)]
    eval_ds = dataset.filter(images=ids)
    grid = (stacks[ids[0]].height, stacks[ids[0]].width)

    baseline_cache = {
        i: dn.fit_histogram_prior(eval_ds, exclude=i).render(*grid) for i in ids
    }
    kde = dn.fit_kde_prior(eval_ds, kde_bandwidth)
    kde_map = kde.render(*grid)
    if gold_bandwidth is None and len(eval_ds.subjects()) >= 2:
        gold_bandwidth = dn.select_bandwidth(eval_ds, (1.0, 2.0, 4.0), grid)
        click.echo(f"selected gold-standard bandwidth: {gold_bandwidth:g} cells")
    gold_fn = None
    if gold_bandwidth is not None and len(eval_ds.subjects()) >= 2:
        cache = {}

        def gold_fn(image_id, subject):
            key = (image_id, subject)
            if key not in cache:
                cache[key] = dn.fit_gold_standard(
                    eval_ds, image_id, subject, gold_bandwidth, grid
                )
            return cache[key]

    report = mt.evaluate_model(
        model, {i: stacks[i] for i in ids}, eval_ds,
        baseline_fn=lambda i: baseline_cache[i],
        gold_fn=gold_fn,
        auc_prior_fn=lambda i: kde_map,
    )
    for line in report.summary_lines():
        click.echo(line)
    if out_csv:
        report.to_csv(out_csv)


@main.group("experiment")
def experiment():
    """Declarative experiment runs."""


@experiment.command("run")
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True))
@click.option("--stacks", "stacks_dir", required=True, type=click.Path(exists=True))
@click.option("--fixations", "fix_csv", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--sweep/--no-sweep", default=False,
              help="Report the best lambda by held-out likelihood.")
def experiment_run(plan_path, stacks_dir, fix_csv, out_dir, sweep):
    """Run leave-one-subject-out training per the plan file."""
    plan = ex.load_plan(plan_path)
    stacks = _load_stacks(stacks_dir)
    dataset = read_fixation_csv(fix_csv)
    if sweep:
        result, best = ex.run_lambda_sweep(plan, stacks, dataset)
        click.echo(f"selected lambda: {best:g}")
    else:
        result = ex.run_cv_training(plan, stacks, dataset)
    ex.write_run_dir(result, out_dir)
    for (fname, lam), ens in sorted(result.ensembles.items()):
        test = f" sauc_test={ens.sauc_test:.4f}" if ens.sauc_test is not None else ""
        click.echo(f"{fname} lambda={lam:g}: sauc_train={ens.sauc_train:.4f}{test}")
    click.echo(f"run written to {out_dir}")


@main.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--stack", "stack_path", required=True, type=click.Path(exists=True))
@click.option("--prior", type=click.Choice(["uniform"]), default="uniform",
              show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def predict_cmd(model_path, stack_path, prior, out_path):
    """Write the predicted fixation density for one stack."""
    model = md.load_model(model_path)
    stack = fs.read_stack(stack_path)
    density = md.predict(model, stack, md.uniform_density(stack.height, stack.width))
    md.save_density(density, out_path)
    y, x = np.unravel_index(np.argmax(density.grid), density.grid.shape)
    click.echo(f"density written; argmax at ({x}, {y})")
