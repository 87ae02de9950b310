"""Command-line entry point: one subcommand per experimental protocol.

Each run writes into its output directory:

* ``manifest.json``: resolved config, artifact digests and result records
  per subcommand, sealed with a SHA-256 digest of its own content;
* the artifacts themselves (datasets, checkpoints, CSV tables);
* ``timings.json``: wall-clock timings, kept out of the manifest because
  they are the only output that legitimately changes between reruns.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, nn_core
from .config import ExperimentConfig, derive_seed, load_config
from .data_pipeline import (
    FrameDataset,
    PhantomParams,
    generate_gmm_dataset,
    generate_phantoms,
    ingest_frame_dir,
    load_dataset,
    save_dataset,
)
from .diffusion_core import (
    GaussianDenoiser,
    GMMDenoiser,
    NeuralDenoiser,
    NoiseSchedule,
    default_denoiser_net,
    denoiser_params,
    edm_train_loss,
)
from .errors import ConfigError, DataError, EchoLabError, NumericError
from .guidance import AnalyticDiscriminator, GuidanceConfig, load_discriminator, save_discriminator, train_discriminator
from .metrics_fid import (
    FeatureExtractor,
    FIDContext,
    compute_stats,
    fid_variance_protocol,
    optimal_fid,
    split_halves,
    subsample_indices,
)
from .samplers import fid_vs_nfe_sweep, sample, sweep_csv
from .shift_lab import ShiftStudyConfig, report_csv, shift_report

MANIFEST = "manifest.json"
TIMINGS = "timings.json"
LOCK = ".lock"

# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def seal(manifest: dict) -> dict:
    body = {k: v for k, v in manifest.items() if k != "digest"}
    return {**body, "digest": hashlib.sha256(canonical(body).encode()).hexdigest()}


def verify_manifest(path) -> dict:
    """Load a manifest and check its seal and every artifact digest."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if seal(manifest).get("digest") != manifest.get("digest"):
        raise DataError(f"{path}: manifest digest mismatch (tampered or corrupt)")
    for cmd in manifest.get("commands", {}).values():
        for name, expected in cmd.get("artifacts", {}).items():
            artifact = path.parent / name
            if not artifact.exists() or sha256_file(artifact) != expected:
                raise DataError(f"{path}: artifact {name} is missing or does not match its digest")
    return manifest


class Run:
    """Output directory, exclusive lock and manifest section for one command."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.output or f"runs/{cfg.run_id}")
        self.artifacts: dict = {}
        self.records: list = []
        self.timings: dict = {}
        self._t0 = time.perf_counter()

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.out / LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ConfigError(f"output directory {self.out} is locked by another run") from exc
        os.close(fd)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self._finish()
        finally:
            (self.out / LOCK).unlink(missing_ok=True)
        return False

    @contextlib.contextmanager
    def timed(self, label):
        t = time.perf_counter()
        yield
        self.timings[label] = time.perf_counter() - t

    def path(self, name) -> Path:
        return self.out / name

    def artifact(self, name: str) -> Path:
        """Register a file written by this command (digest taken at the end)."""
        self.artifacts[name] = None
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.artifact(name)
        p.write_text(text)
        return p

    def record(self, rec: dict) -> None:
        self.records.append(rec)

    def _finish(self):
        mpath = self.out / MANIFEST
        manifest = {}
        if mpath.exists():
            manifest = json.loads(mpath.read_text())
            if manifest.get("run_id") != self.cfg.run_id:
                manifest = {}
        commands = dict(manifest.get("commands", {}))
        commands[self.command] = {
            "config": {k: v for k, v in self.cfg.to_dict().items() if k != "output"},
            "artifacts": {name: sha256_file(self.out / name) for name in sorted(self.artifacts)},
            "records": self.records,
        }
        manifest = {
            "tool": "echolab",
            "version": __version__,
            "run_id": self.cfg.run_id,
            "commands": dict(sorted(commands.items())),
        }
        mpath.write_text(canonical(seal(manifest)))
        tpath = self.out / TIMINGS
        timings = json.loads(tpath.read_text()) if tpath.exists() else {}
        self.timings["total"] = time.perf_counter() - self._t0
        timings[self.command] = self.timings
        tpath.write_text(canonical(timings))


# ---------------------------------------------------------------------------
# Building blocks from the config
# ---------------------------------------------------------------------------


def schedule_from(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    base = {"edm": NoiseSchedule.edm, "vp": NoiseSchedule.vp, "ve": NoiseSchedule.ve}[s.kind]()
    over = {k: v for k, v in (("sigma_min", s.sigma_min), ("sigma_max", s.sigma_max)) if v is not None}
    return replace(base, rho=s.rho, vp_beta_d=s.vp_beta_d, vp_beta_min=s.vp_beta_min, **over)


def resolved(cfg: ExperimentConfig) -> ExperimentConfig:
    """Config with derived defaults (schedule range, dataset seed) filled in."""
    sch = schedule_from(cfg)
    ds_seed = cfg.dataset.seed if cfg.dataset.seed is not None else derive_seed(cfg.seed, "dataset")
    return replace(
        cfg,
        output=cfg.output or f"runs/{cfg.run_id}",
        dataset=replace(cfg.dataset, seed=ds_seed),
        schedule=replace(cfg.schedule, sigma_min=sch.sigma_min, sigma_max=sch.sigma_max),
    )


def real_distribution(cfg: ExperimentConfig):
    """Analytic denoiser of the real data, when the dataset has one."""
    d = cfg.dataset
    if d.kind == "gaussian":
        mean = np.zeros(d.dim) if d.mean is None else np.asarray(d.mean, dtype=float)
        if d.cov is not None:
            cov = d.cov
        else:
            cov = 0.25 if d.variances is None else d.variances
        return GaussianDenoiser(mean, cov)
    if d.kind == "gmm":
        if d.weights is None or d.means is None or d.covs is None:
            raise ConfigError("dataset.weights, dataset.means and dataset.covs are required for kind = \"gmm\"")
        return GMMDenoiser(d.weights, d.means, d.covs)
    return None


def load_real(cfg: ExperimentConfig) -> np.ndarray:
    """Real samples as float64: (n, d) vectors or (n, c, h, w) images in [-1, 1]."""
    d = cfg.dataset
    if d.kind == "gaussian":
        return real_distribution(cfg).sample(d.n, np.random.default_rng(d.seed))
    if d.kind == "gmm":
        x, _ = generate_gmm_dataset(d.weights, d.means, d.covs, d.n, d.seed)
        return x
    if d.kind == "phantom":
        params = PhantomParams(
            d.size, d.sector_angle, tuple(d.apex), d.grain, d.smoothness, tuple(d.intensity_weights),
            tuple(d.intensity_means), tuple(d.intensity_variances), d.structure_seed, d.background,
        )
        return generate_phantoms(params, d.n, d.seed).to_unit()
    if d.kind == "file":
        ds = load_dataset(d.path)
    else:
        ds = ingest_frame_dir(d.path, d.frame_stride, tuple(d.resize))
    x = ds.to_unit().astype(np.float64)
    if x.shape[1:3] == (1, 1):
        x = x[:, 0, 0, :]
    return x[: d.n]


def model_denoiser(cfg: ExperimentConfig, real: np.ndarray):
    m = cfg.model
    if m.kind == "neural":
        net = nn_core.load_network(m.checkpoint)
        return NeuralDenoiser(net, m.sigma_data, real.shape[1:])
    if m.kind == "fitted_gaussian":
        flat = real.reshape(len(real), -1)
        stats = compute_stats(flat)
        base = GaussianDenoiser(stats.mean, stats.covariance + 1e-4 * np.eye(flat.shape[1]), real.shape[1:])
    else:
        base = real_distribution(cfg)
        if base is None:
            raise ConfigError(f"model.kind = {m.kind!r} needs a gaussian or gmm dataset")
        base = type(base)(**{**_denoiser_fields(base), "shape": real.shape[1:]})
        if m.kind == "analytic":
            return base
    shift = np.broadcast_to(np.asarray(m.shift, dtype=float), (base.dim,))
    return base.shifted(shift)


def _denoiser_fields(d):
    if isinstance(d, GaussianDenoiser):
        return {"mean": d.mean, "cov": d.cov}
    return {"weights": d.weights, "means": d.means, "covs": d.covs}


def guidance_from(cfg: ExperimentConfig, real: np.ndarray, model):
    g = cfg.guidance
    if not g.enabled:
        return None, None
    gcfg = GuidanceConfig(g.weight_first_order, g.weight_correction, g.dg_scale)
    if g.discriminator == "analytic":
        real_d = real_distribution(cfg) if cfg.model.kind != "fitted_gaussian" else None
        if real_d is None or not hasattr(model, "log_density"):
            raise ConfigError("analytic guidance needs analytic real and model densities")
        real_d = type(real_d)(**{**_denoiser_fields(real_d), "shape": real.shape[1:]})
        return AnalyticDiscriminator(real_d, model), gcfg
    disc, _ = load_discriminator(g.discriminator)
    return disc, gcfg


def extractor_from(cfg: ExperimentConfig) -> FeatureExtractor:
    m = cfg.metric
    return FeatureExtractor(m.extractor, m.downsample, m.dim, m.feature_seed)


def as_dataset(x: np.ndarray, source: str) -> FrameDataset:
    imgs = x.reshape(len(x), 1, 1, -1) if x.ndim == 2 else x
    return FrameDataset(imgs, [(source, i) for i in range(len(x))], (-1.0, 1.0))


def pinned_real(run: Run, real: np.ndarray, n: int) -> np.ndarray:
    """Real subsample of size n; when pinning, the indices are stored and
    referenced by digest so every later evaluation reuses them."""
    cfg = run.cfg
    if n > len(real):
        raise DataError(f"metric.n = {n} exceeds the real dataset size {len(real)}")
    idx = subsample_indices(len(real), n, derive_seed(cfg.seed, "real-subsample"))
    if cfg.metric.pin_subsample:
        run.artifact("real_subsample.idx").write_bytes(idx.astype("<u8").tobytes())
    return real[idx]


def generate(cfg, real, seed, guided=True):
    model = model_denoiser(cfg, real)
    disc, gcfg = guidance_from(cfg, real, model) if guided else (None, None)
    return sample(cfg.sampler.method, model, schedule_from(cfg), cfg.sampler.steps, cfg.sampler.n,
                  seed, disc, gcfg, real.shape[1:])


def write_rows(run: Run, name: str, rows, columns) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    run.write_text(name, buf.getvalue())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(run: Run):
    cfg = run.cfg
    real = load_real(cfg)
    seed = derive_seed(cfg.seed, "generate")
    with run.timed("sampling"):
        res = generate(cfg, real, seed)
    save_dataset(run.artifact("samples.dbds"), as_dataset(res.samples.astype(np.float32), "generated"))
    rec = {"protocol": "generate", "method": res.method, "steps": res.steps, "nfe": res.nfe,
           "n": cfg.sampler.n, "seed": seed, "guided": cfg.guidance.enabled}
    if cfg.model.kind in ("analytic", "shifted"):
        rec["model_params"] = denoiser_params(model_denoiser(cfg, real))
    run.record(rec)


def _generated_for_metric(run: Run, real):
    cfg = run.cfg
    if cfg.metric.generated:
        x = load_dataset(cfg.metric.generated).to_unit().astype(np.float64)
        return x[:, 0, 0, :] if x.shape[1:3] == (1, 1) and real.ndim == 2 else x, None
    seed = derive_seed(cfg.seed, "generate")
    return generate(cfg, real, seed).samples, seed


def cmd_fid(run: Run):
    cfg = run.cfg
    real = load_real(cfg)
    ext = extractor_from(cfg)
    ctx = FIDContext.from_images(pinned_real(run, real, cfg.metric.n), ext)
    gen, seed = _generated_for_metric(run, real)
    if gen.shape[1:] != real.shape[1:]:
        raise DataError(f"generated samples {gen.shape[1:]} do not match real {real.shape[1:]}")
    rec = ctx.record(gen, seed if seed is not None else -1)
    run.record({"protocol": "fid", **rec.to_dict()})


def cmd_optimal_fid(run: Run):
    cfg = run.cfg
    real = load_real(cfg)
    ext = extractor_from(cfg)
    a, b = split_halves(len(real), cfg.metric.split_seed)
    value = optimal_fid(real, ext, cfg.metric.split_seed)
    run.record({"protocol": "optimal_fid", "extractor": ext.identity, "split_seed": cfg.metric.split_seed,
                "n_half_a": len(a), "n_half_b": len(b), "value": value})


def cmd_fid_variance(run: Run):
    cfg = run.cfg
    real = load_real(cfg)
    ext = extractor_from(cfg)
    model = model_denoiser(cfg, real)
    disc, gcfg = guidance_from(cfg, real, model)
    sch = schedule_from(cfg)

    def gen(seed):
        return sample(cfg.sampler.method, model, sch, cfg.sampler.steps, cfg.sampler.n, seed, disc, gcfg,
                      real.shape[1:]).samples

    m = cfg.metric
    res = fid_variance_protocol(m.mode, m.repeats, m.n, real, gen, ext, derive_seed(cfg.seed, "variance"),
                                m.sub_seeds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repeat", "sub_seed", "fid", "expected_overlap"])
    for r in res.rows:
        w.writerow([r["repeat"], r["sub_seed"], repr(r["fid"]), repr(r["expected_overlap"])])
    w.writerow(["mean±std", "", f"{res.mean!r}±{res.std!r}", ""])
    run.write_text("fid_variance.csv", buf.getvalue())
    run.record({"protocol": "fid_variance", "mode": res.mode, "repeats": m.repeats, "n": m.n,
                "extractor": ext.identity, "mean": res.mean, "std": res.std, "rows": res.rows})


def cmd_sweep_nfe(run: Run):
    cfg = run.cfg
    real = load_real(cfg)
    ext = extractor_from(cfg)
    ctx = FIDContext.from_images(pinned_real(run, real, cfg.metric.n), ext)
    model = model_denoiser(cfg, real)
    disc, gcfg = guidance_from(cfg, real, model)
    seed = derive_seed(cfg.seed, "sweep")
    rows = fid_vs_nfe_sweep(model, schedule_from(cfg), cfg.sampler.step_list, cfg.sampler.n, seed, ctx,
                            cfg.sampler.method, disc, gcfg, real.shape[1:])
    run.write_text("sweep.csv", sweep_csv(rows))
    run.record({"protocol": "sweep_nfe", "extractor": ext.identity, "rows": rows})


def cmd_train_denoiser(run: Run):
    cfg = run.cfg
    t = cfg.training
    real = load_real(cfg)
    seed = derive_seed(cfg.seed, "train-denoiser")
    net = default_denoiser_net(real.shape[1:], tuple(t.hidden), t.dropout, seed)
    den = NeuralDenoiser(net, cfg.model.sigma_data, real.shape[1:])
    rng = np.random.default_rng(seed)
    state = nn_core.AdamState.fresh(net.params.size, t.lr)
    log = []
    for epoch in range(t.epochs):
        losses = []
        for bi in nn_core.minibatches(len(real), t.batch_size, rng):
            loss, grad = edm_train_loss(den, real[bi], rng)
            net.params, state = nn_core.adam_step(net.params, grad, state)
            losses.append(loss)
        nn_core.save_network(run.artifact(f"denoiser_epoch{epoch:03d}.dbnn"), net)
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
    write_rows(run, "denoiser_log.csv", log, ["epoch", "train_loss"])
    run.record({"protocol": "train_denoiser", "seed": seed, "log": log})


def cmd_train_discriminator(run: Run):
    cfg = run.cfg
    t = cfg.training
    real = load_real(cfg)
    if t.generated:
        gen = load_dataset(t.generated).to_unit().astype(np.float64)
        if real.ndim == 2:
            gen = gen.reshape(len(gen), -1)
    else:
        gen = generate(cfg, real, derive_seed(cfg.seed, "generate"), guided=False).samples
    seed = derive_seed(cfg.seed, "train-discriminator")
    sch = schedule_from(cfg)
    with run.timed("training"):
        tr = train_discriminator(real, gen, sch, t.epochs, t.lr, seed, min(t.batch_size, len(real)))
    for epoch, params in enumerate(tr.checkpoints):
        disc = tr.at_epoch(epoch)
        name = f"discriminator_epoch{epoch:03d}.dbnn"
        save_discriminator(run.artifact(name), disc, {
            "schedule": asdict(sch), "epoch": epoch, "epochs": t.epochs, "seed": seed, **tr.log[epoch],
        })
        run.artifact(name + ".json")
    write_rows(run, "discriminator_log.csv", tr.log, ["epoch", "train_loss", "val_accuracy"])
    rec = {"protocol": "train_discriminator", "seed": seed, "log": tr.log}
    if t.select_epoch:
        from .guidance import epoch_selection

        ext = extractor_from(cfg)
        ctx = FIDContext.from_images(pinned_real(run, real, min(cfg.metric.n, len(real))), ext)
        g = cfg.guidance
        gcfg = GuidanceConfig(g.weight_first_order, g.weight_correction, g.dg_scale)
        model = model_denoiser(cfg, real)
        best, table = epoch_selection([tr.at_epoch(e) for e in range(len(tr.checkpoints))], model, sch, gcfg,
                                      ctx, t.selection_n, derive_seed(cfg.seed, "selection"),
                                      cfg.sampler.steps, cfg.sampler.method, real.shape[1:])
        write_rows(run, "epoch_selection.csv", table, ["epoch", "fid"])
        rec.update(best_epoch=best, selection=table)
    run.record(rec)


def cmd_train_classifier(run: Run):
    cfg = run.cfg
    s = cfg.shift
    real = load_real(cfg)
    seed = derive_seed(cfg.seed, "generate")
    pre = generate(cfg, real, seed, guided=False).samples
    post = generate(cfg, real, seed, guided=True).samples if cfg.guidance.enabled else pre
    n_r, n_g = min(s.n_real, len(real)), min(s.n_gen, len(pre))
    cfgs = [ShiftStudyConfig(c, bool(a), s.epochs, s.lr, n_r, n_g, s.split, int(sd), s.batch_size)
            for c in s.classifiers for a in s.augment for sd in s.seeds]
    with run.timed("classifiers"):
        rows = shift_report(real[:n_r], pre[:n_g], post[:n_g], cfgs)
    run.write_text("shift_report.csv", report_csv(rows))
    run.record({"protocol": "shift_report", "rows": rows})


def cmd_report(run: Run):
    runs = run.cfg.report.runs
    if not runs:
        raise ConfigError("report.runs must list at least one run directory")
    rows = []
    for r in runs:
        manifest = verify_manifest(Path(r) / MANIFEST)
        for cmd, body in manifest["commands"].items():
            for i, rec in enumerate(body["records"]):
                for key, value in _flatten(rec):
                    rows.append({"run_id": manifest["run_id"], "command": cmd, "record": i,
                                 "field": key, "value": json.dumps(value)})
    write_rows(run, "report.csv", rows, ["run_id", "command", "record", "field", "value"])
    lines = [f"{len(runs)} run(s), {len(rows)} row(s)"]
    for r in runs:
        m = json.loads((Path(r) / MANIFEST).read_text())
        lines.append(f"{m['run_id']}: {', '.join(sorted(m['commands']))}")
    run.write_text("report.txt", "\n".join(lines) + "\n")
    run.record({"protocol": "report", "runs": list(runs), "rows": len(rows)})


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _flatten(obj[k], f"{prefix}{k}.")
    elif isinstance(obj, list) and obj and all(isinstance(v, dict) for v in obj):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], obj


COMMANDS = {
    "generate": cmd_generate,
    "fid": cmd_fid,
    "optimal-fid": cmd_optimal_fid,
    "fid-variance": cmd_fid_variance,
    "sweep-nfe": cmd_sweep_nfe,
    "train-denoiser": cmd_train_denoiser,
    "train-discriminator": cmd_train_discriminator,
    "train-classifier": cmd_train_classifier,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echolab", description="Desk-scale diffusion evaluation protocols")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--output", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    return parser


def run_command(command: str, cfg: ExperimentConfig) -> Path:
    cfg = resolved(cfg)
    with Run(cfg, command) as run:
        COMMANDS[command](run)
    return run.out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.output is not None:
            cfg = replace(cfg, output=str(args.output))
        limits = contextlib.nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(limits=args.threads)
        with limits:
            out = run_command(args.command, cfg)
    except EchoLabError as exc:
        print(f"echolab: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"echolab: numerical failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    print(f"echolab {args.command}: wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
