"""Outer training loop: alternate the translation and feature-transfer
phases, refresh transferability and pseudo labels between them, checkpoint
every alternation, and evaluate against the held-out target split.

Checkpoints are a JSON manifest plus one raw little-endian float32 blob per
named array (network parameters and optimizer moments), each with a sha256
checksum; the manifest also carries the multipliers, the training RNG state
and the metric history, which is enough to resume a run bit-exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .config import RunConfig, config_hash, config_resume_hash, config_to_dict
from .datasets import (DomainPairDataset, dataset_checksum, load_dataset, save_dataset,
                       synth_generate)
from .errors import DivergenceError, ValidationError
from .evalkit import bound_report, confusion, domain_gap_estimate, iou_per_class, miou
from .feature_transfer import TfState, TfTrainer
from .networks import (NetworkSpec, build_augmentor, build_discriminator, build_segmenter,
                       build_translator)
from .translation import TdState, TdTrainer, zero_p_provider
from .optim import SGD, poly_decay_lr
from .feature_transfer import seg_loss

CHECKPOINT_VERSION = 1


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint_dirs: list[Path] = field(default_factory=list)
    metric_history: list[dict] = field(default_factory=list)
    report_path: Path | None = None

    def history_by_phase(self, phase: str) -> list[dict]:
        return [r for r in self.metric_history if r["phase"] == phase]


def _quantize_u8(images: np.ndarray) -> np.ndarray:
    q = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint_save(state: dict, out_dir) -> Path:
    """state: {"arrays": {name: ndarray}, "scalars": {...}, "meta": {...}}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in state["arrays"].items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        fname = name.replace("/", "_").replace(".", "_") + ".bin"
        blob = arr32.tobytes()
        (out_dir / fname).write_bytes(blob)
        index[name] = {"file": fname, "shape": list(arr.shape),
                       "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arrays": index,
        "scalars": state.get("scalars", {}),
        "meta": state.get("meta", {}),
    }
    (out_dir / "checkpoint.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


def checkpoint_load(ckpt_dir) -> dict:
    ckpt_dir = Path(ckpt_dir)
    mpath = ckpt_dir / "checkpoint.json"
    if not mpath.exists():
        raise ValidationError(f"checkpoint manifest not found: {mpath}", code="CKPT")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {manifest.get('version')}",
                              code="CKPT")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        fpath = ckpt_dir / entry["file"]
        if not fpath.exists():
            raise ValidationError(f"missing checkpoint array file: {entry['file']}", code="CKPT")
        blob = fpath.read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise ValidationError(f"checksum mismatch for array {name!r}", code="CKPT")
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
    return {"arrays": arrays, "scalars": manifest.get("scalars", {}),
            "meta": manifest.get("meta", {})}


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    fixed = copy.deepcopy(state)
    fixed["state"]["state"] = int(fixed["state"]["state"])
    fixed["state"]["inc"] = int(fixed["state"]["inc"])
    fixed["uinteger"] = int(fixed["uinteger"])
    rng.bit_generator.state = fixed
    return rng


# ---------------------------------------------------------------------------
# orchestrator
# ---------------------------------------------------------------------------

class Orchestrator:
    """Builds the five networks and runs the alternating loop."""

    def __init__(self, cfg: RunConfig, out_dir, dataset: DomainPairDataset | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dataset = dataset if dataset is not None else self._resolve_dataset()
        for ex in self.dataset.target_eval:
            if ex.split != "target_eval":
                raise ValidationError("target_eval example without provenance tag")
        self.spec = cfg.networks.to_network_spec(self.dataset.num_classes)
        seeds = np.random.SeedSequence(cfg.orchestrator.seed).spawn(2)
        init_rng = np.random.default_rng(seeds[0])
        self.rng = np.random.default_rng(seeds[1])
        self._build_networks(init_rng)
        self.metric_history: list[dict] = []
        self.completed_alternations = 0
        self._log_path = self.out_dir / "run_log.jsonl"
        self._p_provider = None  # refreshed after each round's Step III

    def _resolve_dataset(self) -> DomainPairDataset:
        ds_cfg = self.cfg.dataset
        if ds_cfg.manifest:
            return load_dataset(ds_cfg.manifest)
        ds = synth_generate(ds_cfg.to_synth_config())
        save_dataset(ds, self.out_dir / "dataset")
        return ds

    def _build_networks(self, rng: np.random.Generator):
        self.t_s2t = build_translator(self.spec, rng)
        self.t_t2s = build_translator(self.spec, rng)
        self.d1 = build_discriminator(self.spec, "image", rng)
        self.d2 = build_discriminator(self.spec, "image", rng)
        self.seg = build_segmenter(self.spec, rng)
        self.aug = build_augmentor(self.spec, rng)
        self.d_f = build_discriminator(self.spec, "feature", rng)
        td_state = TdState(alpha=self.cfg.td.alpha, t_threshold=self.cfg.td.t_threshold,
                           gamma=self.cfg.td.gamma, lambda_init=self.cfg.td.lambda_init,
                           conventional_adv=self.cfg.td.conventional_adv)
        tf_cfg = self.cfg.tf
        tf_state = TfState(beta=tf_cfg.beta, seg_lr=tf_cfg.seg_lr,
                           seg_poly_power=tf_cfg.seg_poly_power,
                           seg_momentum=tf_cfg.seg_momentum,
                           align_lr_scale=tf_cfg.align_lr_scale, aug_lr=tf_cfg.aug_lr,
                           disc_lr=tf_cfg.disc_lr, disc_beta1=tf_cfg.disc_beta1,
                           disc_beta2=tf_cfg.disc_beta2)
        self.td = TdTrainer(self.t_s2t, self.t_t2s, self.d1, self.d2, td_state,
                            lr=self.cfg.td.lr)
        self.tf = TfTrainer(self.seg, self.aug, self.d_f, self.spec, tf_state)

    # -- bookkeeping -----------------------------------------------------
    def _log(self, record: dict):
        self.metric_history.append(record)
        with self._log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        nets = {"t_s2t": self.t_s2t, "t_t2s": self.t_t2s, "d1": self.d1, "d2": self.d2,
                "seg": self.seg, "aug": self.aug, "d_f": self.d_f}
        for prefix, net in nets.items():
            for name, arr in net.state_arrays().items():
                arrays[f"{prefix}.{name}"] = arr
        for opt_name, opt in (("opt_g", self.td.opt_g), ("opt_d", self.td.opt_d),
                              ("opt_seg", self.tf.opt_seg), ("opt_aug", self.tf.opt_aug),
                              ("opt_df", self.tf.opt_df)):
            state = opt.state_dict()
            moment_keys = ("m", "v") if state["kind"] == "adam" else ("velocity",)
            for mk in moment_keys:
                for pname, arr in state[mk].items():
                    arrays[f"{opt_name}.{mk}.{pname}"] = arr
        return arrays

    def _load_named_arrays(self, arrays: dict[str, np.ndarray]):
        nets = {"t_s2t": self.t_s2t, "t_t2s": self.t_t2s, "d1": self.d1, "d2": self.d2,
                "seg": self.seg, "aug": self.aug, "d_f": self.d_f}
        for prefix, net in nets.items():
            sub = {k[len(prefix) + 1:]: v for k, v in arrays.items()
                   if k.startswith(prefix + ".") and not k.startswith("opt")}
            net.load_state_arrays(sub)
        for opt_name, opt in (("opt_g", self.td.opt_g), ("opt_d", self.td.opt_d),
                              ("opt_seg", self.tf.opt_seg), ("opt_aug", self.tf.opt_aug),
                              ("opt_df", self.tf.opt_df)):
            state = opt.state_dict()
            moment_keys = ("m", "v") if state["kind"] == "adam" else ("velocity",)
            for mk in moment_keys:
                store = getattr(opt, mk)
                for pname in store:
                    key = f"{opt_name}.{mk}.{pname}"
                    if key not in arrays:
                        raise ValidationError(f"checkpoint missing optimizer array {key}",
                                              code="CKPT")
                    store[pname] = np.asarray(arrays[key], dtype=store[pname].dtype).copy()

    def save_checkpoint(self, k: int) -> Path:
        scalars = {
            "k": k,
            "lambda_s": self.td.state.lambda_s,
            "lambda_t": self.td.state.lambda_t,
            "opt_steps": {"opt_g": self.td.opt_g.step_count, "opt_d": self.td.opt_d.step_count,
                          "opt_seg": self.tf.opt_seg.step_count,
                          "opt_aug": self.tf.opt_aug.step_count,
                          "opt_df": self.tf.opt_df.step_count},
            "rng_state": _rng_state_to_json(self.rng),
            "metric_history": self.metric_history,
        }
        meta = {
            "config": config_to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "config_resume_hash": config_resume_hash(self.cfg),
            "num_classes": self.dataset.num_classes,
            "image_size": self.dataset.image_size,
            "dataset_checksum": dataset_checksum(self.dataset),
        }
        path = self.out_dir / "checkpoints" / f"alt_{k:03d}"
        return checkpoint_save({"arrays": self._named_arrays(), "scalars": scalars,
                                "meta": meta}, path)

    def load_checkpoint(self, ckpt_dir):
        state = checkpoint_load(ckpt_dir)
        if state["meta"].get("config_resume_hash") != config_resume_hash(self.cfg):
            raise ValidationError("checkpoint was produced by a different config", code="CKPT")
        self._load_named_arrays(state["arrays"])
        sc = state["scalars"]
        self.td.state.lambda_s = float(sc["lambda_s"])
        self.td.state.lambda_t = float(sc["lambda_t"])
        for opt_name, opt in (("opt_g", self.td.opt_g), ("opt_d", self.td.opt_d),
                              ("opt_seg", self.tf.opt_seg), ("opt_aug", self.tf.opt_aug),
                              ("opt_df", self.tf.opt_df)):
            opt.step_count = int(sc["opt_steps"][opt_name])
        self.rng = _rng_from_json(sc["rng_state"])
        self.metric_history = list(sc["metric_history"])
        self.completed_alternations = int(sc["k"])
        if self.completed_alternations >= 1:
            # rebuild the score provider from the restored end-of-round weights
            self._p_provider = _frozen_p_provider(self.seg, self.d_f)

    # -- phases ------------------------------------------------------------
    def translate_source(self, k: int, cache: bool = True) -> np.ndarray:
        """Map the whole source split through the current translator (eval
        mode, deterministic) and quantize to the 8-bit grid."""
        images, _ = self.dataset.split_arrays("source")
        self.t_s2t.set_training(False)
        outs = []
        bs = self.cfg.eval.batch_size
        with ad.no_grad():
            for start in range(0, len(images), bs):
                out, _ = self.t_s2t(images[start:start + bs])
                outs.append(out.data)
        self.t_s2t.set_training(True)
        translated = _quantize_u8(np.concatenate(outs, axis=0))
        if cache:
            cache_dir = self.out_dir / "translations" / f"alt_{k:03d}"
            cache_dir.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(translated):
                arr = np.moveaxis((img * 255.0).astype(np.uint8), 0, -1)
                Image.fromarray(arr, "RGB").save(cache_dir / f"img_{i:05d}.png")
        return translated

    def _features(self, images: np.ndarray) -> np.ndarray:
        """Global-average-pooled high-tap features, [N, C]."""
        feats = []
        bs = self.cfg.eval.batch_size
        with ad.no_grad():
            for start in range(0, len(images), bs):
                _, taps = self.seg.forward_with_taps(images[start:start + bs])
                feats.append(taps["high"].data.mean(axis=(2, 3)))
        return np.concatenate(feats, axis=0)

    def estimate_gap(self, k: int, translated_src: np.ndarray | None) -> dict:
        """Proxy distance between (translated) source and target features.

        Degenerates to nulls when a split is below the estimator's minimum
        sample count instead of failing the run.
        """
        src_images, _ = self.dataset.split_arrays("source")
        tgt_images, _ = self.dataset.split_arrays("target_train")
        if min(len(src_images), len(tgt_images)) < 20:
            return {"d_hat": None, "classifier_error": None, "per_seed": []}
        feats_s = self._features(translated_src if translated_src is not None else src_images)
        feats_t = self._features(tgt_images)
        gap = domain_gap_estimate(feats_s, feats_t,
                                  holdout_fraction=self.cfg.eval.gap_holdout_fraction,
                                  n_seeds=self.cfg.eval.gap_probe_seeds,
                                  seed=self.cfg.orchestrator.seed * 1000 + k)
        return {"d_hat": gap.d_hat, "classifier_error": gap.classifier_error,
                "per_seed": gap.per_seed}

    def evaluate_target(self) -> dict:
        """IoU metrics of the current segmenter on the held-out target split."""
        images, masks = self.dataset.split_arrays("target_eval")
        cm = None
        bs = self.cfg.eval.batch_size
        with ad.no_grad():
            for start in range(0, len(images), bs):
                logits = self.seg(images[start:start + bs])
                pred = logits.data.argmax(axis=1)
                part = confusion(pred, masks[start:start + bs], self.dataset.num_classes)
                cm = part if cm is None else cm + part
        ious = iou_per_class(cm)
        record = {"miou": miou(cm),
                  "iou_per_class": [None if np.isnan(v) else float(v) for v in ious]}
        if self.dataset.num_classes == 2:
            record["iou_normal"] = float(ious[0])
            record["iou_disease"] = float(ious[1])
        return record

    def source_pixel_error(self, translated_src: np.ndarray) -> float:
        """Pixel error of the segmenter on its own (translated) training set."""
        _, masks = self.dataset.split_arrays("source")
        wrong = total = 0
        bs = self.cfg.eval.batch_size
        with ad.no_grad():
            for start in range(0, len(translated_src), bs):
                logits = self.seg(translated_src[start:start + bs])
                pred = logits.data.argmax(axis=1)
                wrong += int((pred != masks[start:start + bs]).sum())
                total += pred.size
        return wrong / total

    # -- main loop ------------------------------------------------------------
    def run(self) -> RunArtifacts:
        cfg = self.cfg
        artifacts = RunArtifacts(out_dir=self.out_dir)
        src_images, src_masks = self.dataset.split_arrays("source")
        tgt_images, _ = self.dataset.split_arrays("target_train")

        if self.completed_alternations == 0:
            eval0 = self.evaluate_target()
            gap0 = self.estimate_gap(0, None)
            self._log({"phase": "eval", "k": 0, **eval0, "gap": gap0,
                       "pseudo_coverage": None})

        start_k = self.completed_alternations + 1
        for k in range(start_k, cfg.orchestrator.alternation_count + 1):
            if cfg.orchestrator.reinit_discriminators and k > start_k:
                re_rng = np.random.default_rng(
                    np.random.SeedSequence((cfg.orchestrator.seed, 7, k)))
                self.d1 = build_discriminator(self.spec, "image", re_rng)
                self.d2 = build_discriminator(self.spec, "image", re_rng)
                self.d_f = build_discriminator(self.spec, "feature", re_rng)
                self.td.d1, self.td.d2 = self.d1, self.d2
                self.tf.d_f = self.d_f

            # (a) translation phase with scores from the previous Step III
            provider = self._p_provider if self._p_provider is not None else zero_p_provider
            try:
                for epoch in range(cfg.td.epochs):
                    self.td.set_epoch_lr(epoch, cfg.td.epochs)
                    bundles = self.td.train_epoch(src_images, tgt_images, provider,
                                                  cfg.td.batch_size, self.rng)
                    means = {kname: float(np.mean([getattr(b, kname) for b in bundles]))
                             for kname in ("adv_s2t", "adv_t2s", "cycle",
                                           "bottleneck_s", "bottleneck_t", "total")}
                    self._log({"phase": "td", "k": k, "epoch": epoch, **means,
                               "lambda_s": self.td.state.lambda_s,
                               "lambda_t": self.td.state.lambda_t})
            except DivergenceError:
                self.save_checkpoint(k - 1)
                raise

            # (b) translate and cache the source set
            translated = self.translate_source(k)

            # (c) feature-transfer round
            step_provider = None
            if self._p_provider is not None:
                step_provider = self._p_provider
            try:
                metrics = self.tf.train_round(
                    translated, src_masks, tgt_images,
                    (cfg.tf.epochs_step1, cfg.tf.epochs_step2, cfg.tf.epochs_step3),
                    cfg.tf.batch_size, self.rng, p_provider=step_provider)
            except DivergenceError:
                self.save_checkpoint(k - 1)
                raise
            self._log({"phase": "tf", "k": k, "seg_loss": metrics.seg_loss,
                       "aug_loss": metrics.aug_loss, "align_loss": metrics.align_loss,
                       "pseudo_coverage": metrics.pseudo_coverage})

            # refresh the transferability provider from end-of-round weights
            self._p_provider = _frozen_p_provider(self.seg, self.d_f)

            # (d) evaluation, gap, checkpoint
            eval_rec = self.evaluate_target()
            gap_rec = self.estimate_gap(k, translated)
            bound = None
            if gap_rec["d_hat"] is not None:
                src_err = self.source_pixel_error(translated)
                bound = bound_report(src_err, _gap_from_record(gap_rec))
            self._log({"phase": "eval", "k": k, **eval_rec, "gap": gap_rec,
                       "pseudo_coverage": metrics.pseudo_coverage, "bound": bound})
            ck = self.save_checkpoint(k)
            artifacts.checkpoint_dirs.append(ck)
            self.completed_alternations = k

        artifacts.metric_history = self.metric_history
        artifacts.report_path = write_report(self.out_dir, self.metric_history)
        return artifacts


def _gap_from_record(rec: dict):
    from .evalkit import GapEstimate
    return GapEstimate(d_hat=rec["d_hat"], classifier_error=rec["classifier_error"],
                       per_seed=rec["per_seed"])


def _frozen_p_provider(seg, d_f):
    """Transferability provider bound to deep copies of the given networks."""
    from .feature_transfer import make_p_provider
    return make_p_provider(copy.deepcopy(seg), copy.deepcopy(d_f))


def alternate_train(cfg: RunConfig, out_dir, resume_from=None,
                    dataset: DomainPairDataset | None = None) -> RunArtifacts:
    """Run (or resume) the full alternating pipeline; see Orchestrator."""
    orch = Orchestrator(cfg, out_dir, dataset=dataset)
    if resume_from is not None:
        orch.load_checkpoint(resume_from)
    return orch.run()


def evaluate_run(ckpt_dir, dataset: DomainPairDataset, out_path=None,
                 eval_batch: int = 8) -> dict:
    """Evaluate a checkpointed segmenter on a dataset's target_eval split."""
    state = checkpoint_load(ckpt_dir)
    meta = state["meta"]
    if meta["num_classes"] != dataset.num_classes:
        raise ValidationError(
            f"checkpoint trained with {meta['num_classes']} classes, dataset has "
            f"{dataset.num_classes}", code="CKPT")
    cfg = _config_from_meta(meta)
    spec = cfg.networks.to_network_spec(dataset.num_classes)
    seg = build_segmenter(spec, np.random.default_rng(0))
    seg.load_state_arrays({k[len("seg."):]: v for k, v in state["arrays"].items()
                           if k.startswith("seg.")})
    images, masks = dataset.split_arrays("target_eval")
    cm = None
    with ad.no_grad():
        for start in range(0, len(images), eval_batch):
            logits = seg(images[start:start + eval_batch])
            pred = logits.data.argmax(axis=1)
            part = confusion(pred, masks[start:start + eval_batch], dataset.num_classes)
            cm = part if cm is None else cm + part
    ious = iou_per_class(cm)
    table = {"miou": miou(cm),
             "iou_per_class": [None if np.isnan(v) else float(v) for v in ious]}
    if dataset.num_classes == 2:
        table["iou_normal"] = float(ious[0])
        table["iou_disease"] = float(ious[1])
    if out_path is not None:
        _write_metric_table(table, out_path)
    return table


def _config_from_meta(meta: dict) -> RunConfig:
    from .config import config_from_dict
    return config_from_dict(meta["config"])


def diagnose_gap(ckpt_dir, dataset: DomainPairDataset, seed: int = 0) -> dict:
    """Domain-gap estimate between source and target feature clouds of a
    checkpointed segmenter, with the error-bound fragment."""
    state = checkpoint_load(ckpt_dir)
    meta = state["meta"]
    if meta["num_classes"] != dataset.num_classes:
        raise ValidationError("checkpoint/dataset class count mismatch", code="CKPT")
    cfg = _config_from_meta(meta)
    spec = cfg.networks.to_network_spec(dataset.num_classes)
    seg = build_segmenter(spec, np.random.default_rng(0))
    seg.load_state_arrays({k[len("seg."):]: v for k, v in state["arrays"].items()
                           if k.startswith("seg.")})

    def features(images):
        feats = []
        with ad.no_grad():
            for start in range(0, len(images), 8):
                _, taps = seg.forward_with_taps(images[start:start + 8])
                feats.append(taps["high"].data.mean(axis=(2, 3)))
        return np.concatenate(feats, axis=0)

    src_images, src_masks = dataset.split_arrays("source")
    tgt_images, _ = dataset.split_arrays("target_train")
    gap = domain_gap_estimate(features(src_images), features(tgt_images), seed=seed)
    wrong = total = 0
    with ad.no_grad():
        for start in range(0, len(src_images), 8):
            pred = seg(src_images[start:start + 8]).data.argmax(axis=1)
            wrong += int((pred != src_masks[start:start + 8]).sum())
            total += pred.size
    return {"d_hat": gap.d_hat, "classifier_error": gap.classifier_error,
            "per_seed": gap.per_seed, "bound": bound_report(wrong / total, gap)}


def train_source_baseline(cfg: RunConfig, dataset: DomainPairDataset) -> dict:
    """Segmenter trained on raw source images only; the no-adaptation anchor.

    Matches the adapted run's Step-I budget (epochs_step1 * alternation_count
    epochs of the same optimizer) so the comparison isolates adaptation.
    """
    spec = cfg.networks.to_network_spec(dataset.num_classes)
    seeds = np.random.SeedSequence(cfg.orchestrator.seed).spawn(2)
    seg = build_segmenter(spec, np.random.default_rng(seeds[0]))
    rng = np.random.default_rng(seeds[1])
    opt = SGD(seg.named_parameters(), cfg.tf.seg_lr, momentum=cfg.tf.seg_momentum)
    images, masks = dataset.split_arrays("source")
    epochs = cfg.tf.epochs_step1 * cfg.orchestrator.alternation_count
    bs = cfg.tf.batch_size
    steps_per_epoch = max(1, int(np.ceil(len(images) / bs)))
    total_steps = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), bs):
            idx = order[start:start + bs]
            opt.lr = poly_decay_lr(cfg.tf.seg_lr, step, total_steps, cfg.tf.seg_poly_power)
            opt.zero_grad()
            loss = seg_loss(seg, images[idx], masks[idx])
            loss.backward()
            opt.step()
            step += 1
    eval_images, eval_masks = dataset.split_arrays("target_eval")
    cm = None
    with ad.no_grad():
        for start in range(0, len(eval_images), 8):
            pred = seg(eval_images[start:start + 8]).data.argmax(axis=1)
            part = confusion(pred, eval_masks[start:start + 8], dataset.num_classes)
            cm = part if cm is None else cm + part
    ious = iou_per_class(cm)
    return {"miou": miou(cm),
            "iou_per_class": [None if np.isnan(v) else float(v) for v in ious]}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _write_metric_table(table: dict, out_path):
    out_path = Path(out_path)
    cols = sorted(table)
    lines = ["\t".join(cols),
             "\t".join(json.dumps(table[c]) if isinstance(table[c], list)
                       else f"{table[c]:.6f}" if isinstance(table[c], float)
                       else str(table[c]) for c in cols)]
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def write_report(out_dir, metric_history: list[dict]) -> Path:
    """Plain-text summary plus raster plots of the per-alternation curves."""
    out_dir = Path(out_dir)
    evals = [r for r in metric_history if r["phase"] == "eval"]
    ks = [r["k"] for r in evals]
    mious = [r["miou"] for r in evals]
    gaps = [r["gap"]["d_hat"] for r in evals]
    covs = [r["pseudo_coverage"] for r in evals]

    lines = ["alternation\tmiou\tgap_d_hat\tpseudo_coverage"]
    for k, m, g, c in zip(ks, mious, gaps, covs):
        cov = "n/a" if c is None else f"{c:.4f}"
        gap = "n/a" if g is None else f"{g:.4f}"
        lines.append(f"{k}\t{m:.4f}\t{gap}\t{cov}")
    bounds = [r.get("bound") for r in evals if r.get("bound")]
    if bounds:
        b = bounds[-1]
        lines.append("")
        lines.append(f"final source pixel error: {b['source_error']:.4f}")
        lines.append(f"final gap estimate: {b['gap_d_hat']:.4f}")
        lines.append("target error upper bound (excluding unestimated constant): "
                     f"{b['upper_bound_excluding_constant']:.4f}")
        lines.append(b["note"])
    report_path = out_dir / "report.txt"
    report_path.write_text("\n".join(lines) + "\n")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        for values, label, fname in ((mious, "target mIoU", "miou_vs_alternation.png"),
                                     ([g for g in gaps if g is not None],
                                      "domain gap estimate", "gap_vs_alternation.png"),
                                     ([c for c in covs if c is not None], "pseudo-label coverage",
                                      "coverage_vs_alternation.png")):
            xs = ks[-len(values):] if values else []
            fig, axis = plt.subplots(figsize=(4, 3))
            axis.plot(xs, values, marker="o")
            axis.set_xlabel("alternation")
            axis.set_ylabel(label)
            fig.tight_layout()
            fig.savefig(out_dir / fname, dpi=110)
            plt.close(fig)
    except Exception:
        pass  # plots are best-effort; the text table is the contract
    return report_path
