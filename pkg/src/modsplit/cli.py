"""Command-line entry point wiring datasets, training, splitters, composition, and bench."""

from __future__ import annotations

import dataclasses
import glob as globmod
import json
import os
import sys

import click
import numpy as np

from . import analysis, bench, composer, data, ga, grad, models
from .errors import ModsplitError
from .store import ArtifactStore, hash_path, hash_strings

CONFIG_VERSION = 1


def load_config(path: str, cls):
    """Strict JSON config loader: requires a version field, rejects unknown keys."""
    with open(path) as f:
        raw = json.load(f)
    version = raw.pop("version", None)
    if version != CONFIG_VERSION:
        raise ValueError(f"{path}: config version must be {CONFIG_VERSION}, got {version}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in raw and isinstance(raw[f.name], list):
            raw[f.name] = tuple(raw[f.name])
    return cls(**raw)


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, default=str))


def _skip_if_cached(store: ArtifactStore, kind: str, input_hash: str, force: bool):
    if force:
        return None
    existing = store.find_by_input(kind, input_hash)
    if existing is None:
        return None
    entry = store.get(existing)
    click.echo(f"unchanged inputs; reusing {existing} at {entry['path']} (use --force to rerun)")
    return existing


@click.group()
@click.option("--store", "store_root", default=None,
              help="Artifact store root (default: $MODSPLIT_HOME or ./modsplit-store)")
@click.pass_context
def cli(ctx, store_root):
    """Decompose trained CNN classifiers into per-class modules and reuse them."""
    ctx.obj = ArtifactStore(store_root)


@cli.command()
@click.option("--arch", type=click.Choice(["plain", "res", "ince"]), required=True)
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--data", "data_path", required=True, help="Dataset manifest dir (split 8:2 internally)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True)
@click.option("--cfg", "cfg_path", default=None, help="TrainConfig JSON override")
@click.option("--n-classes", type=int, default=None, help="Override preset class count")
@click.option("--force", is_flag=True)
@click.pass_obj
def train(store, arch, scale, data_path, seed, out_dir, cfg_path, n_classes, force):
    """Train a CNN of the chosen family on a dataset manifest."""
    dataset = data.load_dataset(data_path)
    if cfg_path:
        cfg = load_config(cfg_path, models.TrainConfig)
    elif scale == "desk":
        cfg = bench.desk_train_config(seed)
    else:
        lr = 0.01 if arch == "plain" else 0.1
        cfg = models.TrainConfig(epochs=200, batch_size=128, lr=lr,
                                 lr_decay_epochs=(60, 120), augment=True, seed=seed)
    input_hash = hash_strings(hash_path(data_path), arch, scale, str(seed), json.dumps(
        dataclasses.asdict(cfg), sort_keys=True))
    if _skip_if_cached(store, "model", input_hash, force):
        return
    kwargs = {} if n_classes is None else {"n_classes": n_classes}
    if scale == "desk":
        kwargs.setdefault("n_classes", dataset.n_classes)
        kwargs["image_side"] = dataset.images.shape[1]
    spec = models.ARCH_PRESETS[(arch, scale)](**kwargs)
    tr, va = data.split_ratio(dataset, [0.8, 0.2], seed=seed, tags=["train", "valid"])
    model = models.train(models.build_model(spec, seed=seed), tr, va, cfg)
    model.save(out_dir)
    artifact = store.register("model", out_dir, input_hash=input_hash)
    _echo_json({"artifact": artifact, "out": out_dir,
                "valid_acc": model.metrics.get("valid_acc")})


@cli.command("split-grad")
@click.option("--model", "model_path", required=True)
@click.option("--data", "data_path", required=True)
@click.option("--cfg", "cfg_path", default=None, help="GradConfig JSON")
@click.option("--out", "out_dir", required=True)
@click.option("--force", is_flag=True)
@click.pass_obj
def split_grad(store, model_path, data_path, cfg_path, out_dir, force):
    """Train binarized kernel masks and heads; writes one module bundle per class."""
    tm = models.TrainedModel.load(model_path)
    dataset = data.load_dataset(data_path)
    cfg = load_config(cfg_path, grad.GradConfig) if cfg_path else bench.desk_grad_config()
    input_hash = hash_strings(hash_path(model_path), hash_path(data_path),
                              json.dumps(dataclasses.asdict(cfg), sort_keys=True))
    if _skip_if_cached(store, "grad-modules", input_hash, force):
        return
    tr, va = data.split_ratio(dataset, [0.8, 0.2], seed=cfg.seed, tags=["train", "valid"])
    result = grad.split(tm, tr, va, cfg)
    os.makedirs(out_dir, exist_ok=True)
    paths = result.save_bundles(tm, out_dir)
    with open(os.path.join(out_dir, "epochs.csv"), "w") as f:
        f.write("epoch,action,valid_acc,retained_fraction,loss1,loss2\n")
        for r in result.log:
            f.write(f"{r['epoch']},{r['action']},{r['valid_acc']},"
                    f"{r['retained_fraction']},{r['loss1']},{r['loss2']}\n")
    artifact = store.register("grad-modules", out_dir, input_hash=input_hash)
    _echo_json({"artifact": artifact, "modules": paths,
                "valid_acc": result.valid_acc,
                "retained_fraction": result.retained_fraction})


@cli.command("split-ga")
@click.option("--model", "model_path", required=True)
@click.option("--data", "data_path", required=True)
@click.option("--cfg", "cfg_path", default=None, help="GAConfig JSON")
@click.option("--groups", type=int, default=8, show_default=True,
              help="Kernel groups per layer (omit for the 10/100 size rule)")
@click.option("--out", "out_dir", required=True)
@click.option("--force", is_flag=True)
@click.pass_obj
def split_ga(store, model_path, data_path, cfg_path, groups, out_dir, force):
    """Genetic search for per-class kernel-group genomes; writes genomes and modules."""
    tm = models.TrainedModel.load(model_path)
    dataset = data.load_dataset(data_path)
    cfg = load_config(cfg_path, ga.GAConfig) if cfg_path else bench.desk_ga_config()
    input_hash = hash_strings(hash_path(model_path), hash_path(data_path), str(groups),
                              json.dumps(dataclasses.asdict(cfg), sort_keys=True))
    if _skip_if_cached(store, "ga-modules", input_hash, force):
        return
    tr, va = data.split_ratio(dataset, [0.8, 0.2], seed=cfg.seed, tags=["train", "valid"])
    tables, plans, prof = analysis.build_analysis(tm, tr, va, groups=groups)
    result = ga.search(tm, va, plans, prof, cfg)
    os.makedirs(out_dir, exist_ok=True)
    analysis.save_analysis(os.path.join(out_dir, "analysis"), tables, plans, prof)
    module_paths = []
    for genome in result.best_genomes:
        gpath = os.path.join(out_dir, f"genome_{genome.class_id:02d}.json")
        with open(gpath, "w") as f:
            f.write(genome.to_json(tm.model_hash()))
        retained = plans[genome.class_id].decode_bits(genome.bits, tm.spec.kernel_slice)
        module = composer.decode(tm, retained, class_id=genome.class_id, provenance="ga")
        module.metrics = {"fitness": genome.fitness,
                          "retained_fraction": module.retained_fraction()}
        mpath = os.path.join(out_dir, f"class_{genome.class_id:02d}")
        module.save(mpath)
        module_paths.append(mpath)
    with open(os.path.join(out_dir, "search_log.csv"), "w") as f:
        f.write("generation,best_fitness,best_acc,best_diff,cm_evaluations\n")
        for r in result.log:
            f.write(f"{r['generation']},{r['best_fitness']},{r['best_acc']},"
                    f"{r['best_diff']},{r['cm_evaluations']}\n")
    artifact = store.register("ga-modules", out_dir, input_hash=input_hash)
    _echo_json({"artifact": artifact, "modules": module_paths,
                "best_fitness": result.best_fitness, "best_acc": result.best_acc,
                "status": result.status})


@cli.command()
@click.option("--model", "model_path", required=True)
@click.option("--genome", "genome_path", default=None, help="GA genome JSON")
@click.option("--analysis", "analysis_path", default=None,
              help="Analysis artifact dir (required with --genome)")
@click.option("--mask", "mask_path", default=None,
              help="JSON file with a per-kernel 0/1 list under key 'retained'")
@click.option("--out", "out_dir", required=True)
@click.pass_obj
def decode(store, model_path, genome_path, analysis_path, mask_path, out_dir):
    """Materialize a standalone sliced module from a genome or per-kernel mask."""
    tm = models.TrainedModel.load(model_path)
    if (genome_path is None) == (mask_path is None):
        raise click.UsageError("give exactly one of --genome or --mask")
    if genome_path:
        if analysis_path is None:
            raise click.UsageError("--genome requires --analysis for the grouping plan")
        with open(genome_path) as f:
            genome, model_hash = ga.KernelGenome.from_json(f.read())
        if model_hash != tm.model_hash():
            raise ValueError("genome was produced for a different model")
        _, plans, _ = analysis.load_analysis(analysis_path)
        retained = plans[genome.class_id].decode_bits(genome.bits, tm.spec.kernel_slice)
        class_id = genome.class_id
    else:
        with open(mask_path) as f:
            retained = np.array(json.load(f)["retained"], dtype=np.uint8)
        class_id = 0
    module = composer.decode(tm, retained, class_id=class_id)
    module.save(out_dir)
    artifact = store.register("module", out_dir)
    _echo_json({"artifact": artifact, "out": out_dir,
                "retained_fraction": module.retained_fraction()})


@cli.command("eval-modules")
@click.option("--candidates", "candidates_glob", required=True,
              help="Glob of module bundle dirs, e.g. 'runs/*/class_*'")
@click.option("--data", "data_path", required=True)
@click.option("--report", "report_path", required=True, help="Output F1 CSV")
def eval_modules(candidates_glob, data_path, report_path):
    """Score candidate modules per target class by F1 and recommend the best."""
    paths = sorted(p for p in globmod.glob(candidates_glob) if os.path.isdir(p))
    if not paths:
        raise ValueError(f"no module bundles match {candidates_glob!r}")
    dataset = data.load_dataset(data_path)
    candidates: dict[int, list] = {}
    for p in paths:
        module = composer.SlicedModule.load(p)
        candidates.setdefault(module.class_id, []).append(module)
    result = composer.evaluate_and_recommend(candidates, dataset)
    rows = list(result.rows())
    os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
    with open(report_path, "w") as f:
        keys = list(rows[0].keys())
        f.write(",".join(keys) + "\n")
        for r in rows:
            f.write(",".join(str(r[k]) for k in keys) + "\n")
    _echo_json({"report": report_path,
                "recommended": {tc: result.best_index[tc]
                                for tc in range(len(result.best_index))}})


@cli.command()
@click.option("--modules", "module_paths", required=True, multiple=True,
              help="Module bundle dirs, one per class")
@click.option("--mode", type=click.Choice(["parallel", "serial"]), default="parallel",
              show_default=True)
@click.option("--out", "out_dir", required=True)
@click.pass_obj
def compose(store, module_paths, mode, out_dir):
    """Assemble per-class modules into an N-class composed model manifest."""
    modules = [composer.SlicedModule.load(p) for p in module_paths]
    cm = composer.compose(modules, mode=mode)
    os.makedirs(out_dir, exist_ok=True)
    cm.save_manifest(os.path.join(out_dir, "composed.json"),
                     [os.path.abspath(p) for p in module_paths])
    artifact = store.register("composed", out_dir)
    _echo_json({"artifact": artifact, "out": out_dir, "n_classes": cm.n_classes,
                "mode": mode})


@cli.command()
@click.option("--weak", "weak_path", required=True)
@click.option("--module", "module_path", required=True)
@click.option("--tc", type=int, required=True)
@click.option("--calib", "calib_path", required=True,
              help="Manifest of class-tc calibration samples")
@click.option("--out", "out_dir", required=True)
@click.pass_obj
def patch(store, weak_path, module_path, tc, calib_path, out_dir):
    """Replace a weak model's target-class output with a calibrated module score."""
    weak = models.TrainedModel.load(weak_path)
    module = composer.SlicedModule.load(module_path)
    calib = data.load_dataset(calib_path)
    if np.any(calib.labels != tc):
        idx = np.nonzero(calib.labels == tc)[0]
        if len(idx) == 0:
            raise ValueError(f"calibration data has no class-{tc} samples")
        calib = calib.subset(idx)
    patched = composer.patch(weak, module, tc, calib)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "patched.json"), "w") as f:
        json.dump({"weak": os.path.abspath(weak_path),
                   "module": os.path.abspath(module_path),
                   "tc": tc, "calibration": list(patched.calibration)}, f, indent=2)
    artifact = store.register("patched", out_dir)
    _echo_json({"artifact": artifact, "out": out_dir,
                "calibration": patched.calibration})


@cli.command()
@click.option("--model", "model_path", required=True)
@click.option("--factor", type=int, default=1, show_default=True,
              help="Operations counted per multiply-accumulate")
def flops(model_path, factor):
    """Print the per-layer FLOPs report for a model or module bundle."""
    spec_path = os.path.join(model_path, "spec.json")
    if not os.path.exists(spec_path):
        spec_path = os.path.join(model_path, "sliced", "spec.json")
    with open(spec_path) as f:
        spec = models.ArchitectureSpec.from_json(f.read())
    report = models.count_flops(spec, mul_add_factor=factor)
    _echo_json({"convention": report.convention, "total": report.total,
                "conv_total": report.conv_total,
                "per_layer": [{"layer": k, "flops": v} for k, v in report.per_layer]})


@cli.command("bench")
@click.option("--scenario", type=click.Choice(["rq1", "rq2", "rq3", "rq4", "rq5"]),
              required=True)
@click.option("--cfg", "cfg_path", default=None, help="ExperimentConfig JSON")
@click.option("--out", "out_dir", default=None)
@click.option("--seeds", default=None, help="Comma-separated seed list override")
def bench_cmd(scenario, cfg_path, out_dir, seeds):
    """Run a desk-scale experiment scenario and write its report."""
    name = {
        "rq1": "rq1_modularize", "rq2": "rq2_patch", "rq3": "rq3_reuse",
        "rq4": "rq4_newtask", "rq5": "rq5_overhead",
    }[scenario]
    if cfg_path:
        cfg = load_config(cfg_path, bench.ExperimentConfig)
        if cfg.scenario != name:
            raise ValueError(f"config scenario {cfg.scenario!r} does not match --scenario")
    else:
        if out_dir is None:
            raise click.UsageError("--out is required when no --cfg is given")
        cfg = bench.ExperimentConfig(scenario=name, out_dir=out_dir)
    if out_dir:
        cfg.out_dir = out_dir
    if seeds:
        cfg.seeds = tuple(int(s) for s in seeds.split(","))
    report = bench.run(cfg)
    _echo_json({"report": report.summary_path,
                "verdicts": [{v["metric"]: "pass" if v["pass"] else "FAIL"}
                             for v in report.verdicts]})


def dispatch(argv) -> int:
    """Run one CLI invocation; 0 on success, 1 on failure, 2 on usage errors."""
    try:
        cli.main(args=list(argv), standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(exc.format_message(), err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 2
    except (ModsplitError, ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
