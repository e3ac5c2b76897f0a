"""Pipeline stages behind the command line: generate, train, infer, evaluate, ablate.

Every stage is a function of an :class:`ExperimentConfig`.  Output files are
a deterministic function of the configuration; wall-clock information only
goes to ``run.log`` in the output directory.
"""

from __future__ import annotations

import dataclasses
import logging
import os

import numpy as np

from . import metrics, storage
from .config import ConfigError, DataConfig, EvalConfig, ExperimentConfig
from .datagen import GeneratorConfig, HomographySpec, PerturbationSpec, generate_triplet, sample_seed
from .geometry import multi_scale_inference, two_stage_inference
from .network import PyramidNet
from .plots import write_line_plot
from .training import Dataset, DivergenceError, train

log = logging.getLogger("denseprob")

SPLITS = {"train": 0, "test": 1}

# name -> (network overrides, training split)
VARIANTS = {
    "l1": ({"head": "l1"}, "train"),
    "single": ({"mixture": "single"}, "train"),
    "unconstrained": ({"mixture": "unconstrained"}, "train"),
    "constrained": ({}, "train"),
    "noperturb": ({}, "train_clean"),
    "nopropagate": ({"propagate": False}, "train"),
    "common": ({"decoder": "common"}, "train"),
    "corrunc": ({"decoder": "correlation"}, "train"),
}


# ------------------------------------------------------------------- helpers
def data_dir(cfg: ExperimentConfig) -> str:
    return cfg.data_dir or os.path.join(cfg.out, "data")


def checkpoint_path(cfg: ExperimentConfig) -> str:
    return cfg.checkpoint or os.path.join(cfg.out, "model.ckpt")


def split_seed(seed: int, split: str) -> int:
    """Master seed of a data split (the clean copy shares the training seed)."""
    key = SPLITS["train" if split == "train_clean" else split]
    return int(np.random.SeedSequence([int(seed), key]).generate_state(1)[0])


def generator_config(dc: DataConfig, perturb: bool) -> GeneratorConfig:
    return GeneratorConfig(
        size=dc.size, channels=dc.channels,
        homography=HomographySpec(size=dc.size, corner_range=dc.corner_range, translation=dc.translation),
        perturb=perturb,
        perturbation=PerturbationSpec(dc.perturb_amplitude, dc.perturb_smoothness, dc.perturb_masks,
                                      dc.perturb_sigma, dc.perturb_max_norm),
        object_prob=dc.object_prob, flat_fraction=dc.flat_fraction)


def _fmt(v) -> str:
    v = float(v)
    return f"{v:.6f}" if np.isfinite(v) else "nan"


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(x if isinstance(x, str) else _fmt(x) for x in r) + "\n")


def _attach_log(out):
    os.makedirs(out, exist_ok=True)
    path = os.path.abspath(os.path.join(out, "run.log"))
    for h in log.handlers:
        if getattr(h, "baseFilename", None) == path:
            return
    h = logging.FileHandler(path)
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(h)
    log.setLevel(logging.INFO)


# ------------------------------------------------------------------ generate
def _splits(cfg: ExperimentConfig, clean=None):
    dc = cfg.data
    out = [("train", dc.train_count, dc.perturb), ("test", dc.test_count, dc.test_perturb)]
    if dc.clean_copy if clean is None else clean:
        out.append(("train_clean", dc.train_count, False))
    return out


def run_generate(cfg: ExperimentConfig, clean=None) -> dict:
    """Write every split as numbered triplet files plus a manifest.

    Existing sample files are kept, so an interrupted run resumes where it
    stopped.  A directory produced by a different data configuration is
    rejected.
    """
    _attach_log(cfg.out)
    root = data_dir(cfg)
    dirs = {}
    # counts may grow between runs; everything else must match existing files
    stamp = f"seed = {cfg.seed}\n" + "".join(
        f"{f.name} = {getattr(cfg.data, f.name)}\n" for f in dataclasses.fields(cfg.data)
        if f.name not in ("train_count", "test_count", "clean_copy"))
    for split, count, perturb in _splits(cfg, clean):
        d = os.path.join(root, split)
        os.makedirs(d, exist_ok=True)
        sp = os.path.join(d, "source.txt")
        key = f"split = {split}\nperturb = {perturb}\n{stamp}"
        if os.path.exists(sp):
            with open(sp) as fh:
                if fh.read() != key:
                    raise ConfigError(f"{d} holds data generated from a different configuration")
        else:
            with open(sp, "w") as fh:
                fh.write(key)
        gcfg = generator_config(cfg.data, perturb)
        master = split_seed(cfg.seed, split)
        made = 0
        for i in range(count):
            path = os.path.join(d, storage.triplet_name(i))
            if os.path.exists(path):
                continue
            storage.write_triplet(path, generate_triplet(gcfg, sample_seed(master, i)))
            made += 1
        storage.write_manifest(d, count, {"split": split, "perturb": bool(perturb), "seed": int(cfg.seed)})
        log.info("split %s: %d samples (%d new)", split, count, made)
        dirs[split] = d
    return dirs


def load_split(cfg: ExperimentConfig, split: str, limit=None) -> Dataset:
    return storage.load_dataset(os.path.join(data_dir(cfg), split), limit)


# --------------------------------------------------------------------- train
def build_net(cfg: ExperimentConfig) -> PyramidNet:
    return PyramidNet(cfg.net, seed=cfg.seed)


def train_net(cfg: ExperimentConfig, data: Dataset):
    net = build_net(cfg)
    tc = dataclasses.replace(cfg.train, seed=cfg.seed)
    return train(net, data, tc)


def run_train(cfg: ExperimentConfig, split="train"):
    """Train on a generated split; writes the checkpoint and ``loss.csv``."""
    _attach_log(cfg.out)
    data = load_split(cfg, split)
    if len(data) == 0:
        raise ConfigError(f"training split {split!r} is empty")
    log.info("training on %d samples for %d iterations", len(data), cfg.train.iterations)
    res = train_net(cfg, data)
    ck = checkpoint_path(cfg)
    os.makedirs(os.path.dirname(os.path.abspath(ck)), exist_ok=True)
    storage.save_checkpoint(ck, res.net)
    rows = [(str(i), l, *ll) for i, (l, ll) in enumerate(zip(res.losses, res.level_losses))]
    _write_csv(os.path.join(cfg.out, "loss.csv"), ["iteration", "loss", "level1", "level2"], rows)
    return res


def load_net(cfg: ExperimentConfig) -> PyramidNet:
    ck = checkpoint_path(cfg)
    if not os.path.exists(ck):
        raise ConfigError(f"checkpoint {ck} does not exist")
    return storage.load_checkpoint(ck)


# --------------------------------------------------------------------- infer
@dataclasses.dataclass
class Predictions:
    flow: np.ndarray  # (N, H, W, 2)
    confidence: object  # (N, H, W) or None
    homographies: list  # per pair: 3x3 array or None
    scales: list
    inlier_ratios: list
    fallbacks: list


def predict_dataset(net: PyramidNet, data: Dataset, ec: EvalConfig, batch=25) -> Predictions:
    n = len(data)
    if ec.mode == "single":
        flows, confs = [], []
        for s in range(0, n, batch):
            p = net.predict(data.ref[s:s + batch], data.query[s:s + batch], ec.radius)
            flows.append(p.flow)
            confs.append(p.confidence)
        conf = None if confs[0] is None else np.concatenate(confs)
        return Predictions(np.concatenate(flows), conf, [None] * n, [None] * n, [0.0] * n, [True] * n)
    flows, confs, Hs, scales, ratios, fb = [], [], [], [], [], []
    for i in range(n):
        if ec.mode == "two_stage":
            r = two_stage_inference(net, data.ref[i], data.query[i], ec.match_threshold, ec.radius, ec.inlier_floor)
        else:
            r = multi_scale_inference(net, data.ref[i], data.query[i], ec.scales, ec.match_threshold, ec.radius,
                                      ec.inlier_floor)
        flows.append(r.flow)
        confs.append(r.confidence)
        Hs.append(r.homography)
        scales.append(r.scale)
        ratios.append(r.inlier_ratio)
        fb.append(r.fallback)
    conf = None if confs[0] is None else np.stack(confs)
    return Predictions(np.stack(flows), conf, Hs, scales, ratios, fb)


def run_infer(cfg: ExperimentConfig) -> Predictions:
    """Predict the test split; writes ``pred/*.pred`` and ``homographies.csv``."""
    _attach_log(cfg.out)
    net = load_net(cfg)
    data = load_split(cfg, "test", cfg.eval.limit or None)
    pred = predict_dataset(net, data, cfg.eval)
    pdir = os.path.join(cfg.out, "pred")
    os.makedirs(pdir, exist_ok=True)
    rows = []
    for i in range(len(data)):
        storage.write_prediction(os.path.join(pdir, f"{i:06d}.pred"), pred.flow[i],
                                 None if pred.confidence is None else pred.confidence[i])
        H = pred.homographies[i]
        h = ["nan"] * 9 if H is None else [repr(float(v)) for v in np.ravel(H)]
        s = pred.scales[i]
        rows.append([str(i), str(int(pred.fallbacks[i])), "nan" if s is None else _fmt(s),
                     pred.inlier_ratios[i]] + h)
    header = ["image", "fallback", "scale", "inlier_ratio"] + [f"h{r}{c}" for r in range(3) for c in range(3)]
    _write_csv(os.path.join(cfg.out, "homographies.csv"), header, rows)
    log.info("wrote %d predictions (%s)", len(data), cfg.eval.mode)
    return pred


# ------------------------------------------------------------------ evaluate
@dataclasses.dataclass
class Scores:
    summary: dict
    per_image: list  # list of dicts
    curve: object  # averaged SparsificationCurve or None
    oracle: object


def _confidence_for(source, err_img, conf_img):
    if source == "oracle":
        return -err_img
    if source == "constant":
        return np.zeros_like(err_img)
    return conf_img


def score_predictions(flow, confidence, data: Dataset, ec: EvalConfig) -> Scores:
    """All flow and calibration metrics through :mod:`metrics` calls."""
    Ts = tuple(ec.pck_thresholds)
    per = []
    errs, confs = [], []
    for i in range(len(data)):
        v = data.valid[i]
        row = {"aepe": np.nan, "f1": np.nan, "ause": np.nan}
        row.update({f"pck{t:g}": np.nan for t in Ts})
        if v.any():
            e = metrics.endpoint_errors(flow[i], data.flow[i], v)
            row["aepe"] = metrics.aepe(flow[i], data.flow[i], v)
            for t in Ts:
                row[f"pck{t:g}"] = metrics.pck(flow[i], data.flow[i], t, v)
            row["f1"] = metrics.f1_outlier_rate(flow[i], data.flow[i], v)
            c = None if confidence is None else confidence[i][v]
            c = _confidence_for(ec.confidence, e, c)
            if c is not None:
                row["ause"] = metrics.ause(metrics.sparsification(e, c), metrics.oracle_curve(e))
                errs.append(e)
                confs.append(c)
        per.append(row)
    summary = {"aepe": metrics.aepe(flow, data.flow, data.valid)}
    for t in Ts:
        summary[f"pck{t:g}"] = metrics.pck(flow, data.flow, t, data.valid)
    summary["f1"] = metrics.f1_outlier_rate(flow, data.flow, data.valid)
    curve = oracle = None
    summary["ause"] = np.nan
    if errs:
        summary["ause"], curve, oracle = metrics.ause_per_image(errs, confs)
    return Scores(summary, per, curve, oracle)


def run_evaluate(cfg: ExperimentConfig) -> Scores:
    """Score the test split; writes ``metrics.csv``, ``sparsification.csv`` and an SVG plot."""
    _attach_log(cfg.out)
    net = load_net(cfg)
    data = load_split(cfg, "test", cfg.eval.limit or None)
    pred = predict_dataset(net, data, cfg.eval)
    sc = score_predictions(pred.flow, pred.confidence, data, cfg.eval)
    cols = list(sc.summary)
    rows = [[str(i)] + [r[k] for k in cols] for i, r in enumerate(sc.per_image)]
    rows.append(["all"] + [sc.summary[k] for k in cols])
    _write_csv(os.path.join(cfg.out, "metrics.csv"), ["image"] + cols, rows)
    if sc.curve is not None:
        c, o = sc.curve, sc.oracle
        _write_csv(os.path.join(cfg.out, "sparsification.csv"), ["fraction", "sparsification", "oracle", "error"],
                   list(zip(c.fractions, c.values, o.values, c.values - o.values)))
        write_line_plot(os.path.join(cfg.out, "sparsification.svg"),
                        {"sparsification": (c.fractions, c.values), "oracle": (o.fractions, o.values)},
                        title=f"Sparsification (AUSE {sc.summary['ause']:.4f})",
                        xlabel="fraction removed", ylabel="normalized AEPE")
    log.info("evaluated %d pairs: aepe %.4f ause %.4f", len(data), sc.summary["aepe"], sc.summary["ause"])
    return sc


# -------------------------------------------------------------------- ablate
ABLATE_COLUMNS = ("variant", "status", "aepe", "pck1", "pck5", "f1", "ause")


def variant_config(cfg: ExperimentConfig, name: str):
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {name!r}; choose from {sorted(VARIANTS)}")
    over, split = VARIANTS[name]
    try:
        net = dataclasses.replace(cfg.net, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return dataclasses.replace(cfg, net=net), split


def run_ablate(cfg: ExperimentConfig):
    """Train and score each configured variant under one seed.

    Writes ``ablation.csv`` and one checkpoint per variant under ``models/``.
    A variant whose training diverges is recorded as ``failed`` and the
    sweep continues.  Returns the table rows as dicts.
    """
    variants = list(cfg.ablate.variants)
    if not variants:
        raise ConfigError("the ablation variant list is empty")
    plans = [(name,) + variant_config(cfg, name) for name in variants]
    _attach_log(cfg.out)
    run_generate(cfg, clean=any(split == "train_clean" for _, _, split in plans) or None)
    test = load_split(cfg, "test", cfg.eval.limit or None)
    ec = dataclasses.replace(cfg.eval, mode="single")
    mdir = os.path.join(cfg.out, "models")
    os.makedirs(mdir, exist_ok=True)
    cache = {}
    table = []
    for name, vcfg, split in plans:
        if split not in cache:
            cache[split] = load_split(cfg, split)
        row = {"variant": name, "status": "ok"}
        try:
            res = train_net(vcfg, cache[split])
            storage.save_checkpoint(os.path.join(mdir, f"{name}.ckpt"), res.net)
            pred = predict_dataset(res.net, test, ec)
            sc = score_predictions(pred.flow, pred.confidence, test, ec)
            row.update(sc.summary)
        except (DivergenceError, FloatingPointError) as exc:
            log.warning("variant %s failed: %s", name, exc)
            row["status"] = "failed"
        log.info("variant %s: %s", name, row)
        table.append(row)
    cols = list(ABLATE_COLUMNS)
    extra = sorted({k for r in table for k in r} - set(cols))
    cols += extra
    _write_csv(os.path.join(cfg.out, "ablation.csv"), cols,
               [[r[k] if k in ("variant", "status") else r.get(k, np.nan) for k in cols] for r in table])
    return table
