"""Two-stage training: Initialization (sparse pCE + affinity, temporal ensembling)
then Main (pseudo-label self-training with noise masking and soft re-supervision).

Random state: the root ``train.seed`` is split with ``numpy.random.SeedSequence``
into three children used, in order, for weight initialization, epoch shuffling
and augmentation.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .anpm import anpm_round, reassign_noisy
from .backbone import UNet, count_parameters, load_checkpoint, save_checkpoint
from .config import AffinityConfig, Config, ConfigError
from .data import UNLABELED, Dataset, from_onehot, to_onehot, write_label_dir
from .evaluation import denoised_label_dsc
from .losses import ZeroLabeledError, low_affinity, noise_dice_loss, pce_loss, prsa_loss_from_refined
from .prototypes import PrototypeMemory, build_prototypes, pixel_embeddings, refine_prediction, relation_matrix
from .pseudo_init import PredictionBuffer

log = logging.getLogger(__name__)

INIT, MAIN = "INIT", "MAIN"


def lr_schedule(it: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * (1 - it / max_iter) ** power


def split_seeds(seed: int) -> tuple[int, np.random.Generator, np.random.Generator]:
    weights, order, aug = np.random.SeedSequence(seed).spawn(3)
    return int(weights.generate_state(1)[0] % 2**31), np.random.default_rng(order), np.random.default_rng(aug)


@dataclass
class LoopState:
    model: UNet
    optimizer: torch.optim.Optimizer
    order_rng: np.random.Generator
    aug_rng: np.random.Generator
    total_iters: int
    it: int = 0
    epoch: int = 0


def make_state(cfg: Config, total_epochs: int, n_samples: int, model: UNet | None = None) -> LoopState:
    wseed, order_rng, aug_rng = split_seeds(cfg.train.seed)
    if model is None:
        model = UNet(cfg.network, seed=wseed)
    t = cfg.train
    opt = torch.optim.SGD(model.parameters(), lr=t.lr0, momentum=t.momentum, weight_decay=t.weight_decay)
    ipe = -(-n_samples // t.batch_size)
    return LoopState(model, opt, order_rng, aug_rng, total_iters=max(1, total_epochs * ipe))


def _augment(maps, k, flip):
    """Apply the same rot90/flip to every ``... x H x W`` tensor in ``maps``."""
    out = []
    for m in maps:
        if m is None:
            out.append(None)
            continue
        m = torch.rot90(m, k, dims=(-2, -1))
        out.append(torch.flip(m, dims=(-1,)) if flip else m)
    return out


def _batches(state: LoopState, ids, batch_size):
    order = state.order_rng.permutation(len(ids))
    for s in range(0, len(ids), batch_size):
        yield [ids[j] for j in order[s:s + batch_size]]


class SampleStore:
    """Per-sample tensors used by the loop (images, cached low-level affinity, labels)."""

    def __init__(self, ds: Dataset, aff: AffinityConfig | None):
        self.ds = ds
        self.c = ds.num_classes
        self.image = {i: torch.from_numpy(ds.images[i])[None] for i in ds.ids}
        self.sparse = {i: torch.from_numpy(to_onehot(ds.sparse[i], self.c)) for i in ds.ids}
        self._aff = aff
        self._a_low = {}

    def a_low(self, i):
        if i not in self._a_low:
            self._a_low[i] = low_affinity(self.image[i][None], self._aff)[0]
        return self._a_low[i]


def _assemble(store: SampleStore, ids, state: LoopState, augment: bool, extra: dict, need_a_low: bool):
    """Stack a batch; ``extra`` maps name -> {id: C x H x W tensor}."""
    rows = {k: [] for k in ["image", "sparse", "a_low", *extra]}
    for i in ids:
        if augment:
            k = int(state.aug_rng.integers(4))
            flip = bool(state.aug_rng.integers(2))
        else:
            k, flip = 0, False
        names = ["image", "sparse", "a_low", *extra]
        src = [store.image[i], store.sparse[i], store.a_low(i) if need_a_low else None,
               *[extra[n][i] if extra[n] is not None else None for n in extra]]
        for n, t in zip(names, _augment(src, k, flip) if augment else src):
            rows[n].append(t)
    return {n: (torch.stack(v) if v and v[0] is not None else None) for n, v in rows.items()}


@dataclass
class StepTerms:
    values: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def total(self):
        return sum(self.weights[k] * v for k, v in self.values.items())


def compute_losses(model, batch, stage: str, cfg: Config, memory: PrototypeMemory | None = None) -> StepTerms:
    """All active loss terms for one batch. Terms whose coefficient is 0 are not computed."""
    t, flags, aff = cfg.train, cfg.train.ablation, cfg.affinity
    x = batch["image"]
    res = model(x)
    prob = torch.softmax(res.logits, dim=1)
    terms = StepTerms()
    terms.values["pce1"] = pce_loss(prob, batch["sparse"])
    terms.weights["pce1"] = 1.0

    if stage == INIT:
        want_prsa = flags.use_prsa and flags.use_init_prsa and t.lambda1 > 0
        want_noise = False
        proto_labels = batch["sparse"]
    else:
        st = flags.self_training
        if st and t.lambda2 > 0:
            labels = batch["denoised"]
            if labels.sum() > 0:
                terms.values["pce2"] = pce_loss(prob, labels)
            else:
                terms.values["pce2"] = prob.sum() * 0.0
            terms.weights["pce2"] = t.lambda2
        want_prsa = st and flags.use_prsa and t.lambda3 > 0
        want_noise = flags.use_anpm and flags.use_noise_loss and t.lambda4 > 0
        proto_labels = batch["denoised"]

    if want_prsa or want_noise:
        size = x.shape[-2:]
        hi, lo, feats = pixel_embeddings(res.embed_high, res.embed_low, size)
        protos = build_prototypes(hi, lo, proto_labels, t.prototype_granularity, memory)
        p_hat = refine_prediction(res.logits, relation_matrix(feats, protos))
        if want_prsa:
            terms.values["prsa"] = prsa_loss_from_refined(x, p_hat, aff, a_low=batch.get("a_low"))
            terms.weights["prsa"] = t.lambda1 if stage == INIT else t.lambda3
        if want_noise:
            p_noisy, y_soft = reassign_noisy(batch["noisy"], prob, p_hat)
            terms.values["noise"] = noise_dice_loss(p_noisy, y_soft)
            terms.weights["noise"] = t.lambda4
    return terms


def _step(state: LoopState, terms: StepTerms, cfg: Config) -> float:
    t = cfg.train
    lr = lr_schedule(min(state.it, state.total_iters), state.total_iters, t.lr0, t.poly_power)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    loss = terms.total()
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if t.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), t.grad_clip)
    state.optimizer.step()
    state.it += 1
    return lr


@torch.no_grad()
def predict_probs(model: UNet, store_or_images, ids, batch_size: int = 16):
    """Eval-mode softmax probabilities for un-augmented images, yielded per sample id."""
    was = model.training
    model.eval()
    try:
        for s in range(0, len(ids), batch_size):
            chunk = ids[s:s + batch_size]
            if isinstance(store_or_images, SampleStore):
                x = torch.stack([store_or_images.image[i] for i in chunk])
            else:
                x = torch.stack([torch.as_tensor(store_or_images[i])[None] for i in chunk])
            prob = torch.softmax(model(x).logits, dim=1)
            yield from zip(chunk, prob)
    finally:
        model.train(was)


class RunLog:
    """JSON-lines epoch log plus a list of artifacts written by the run."""

    def __init__(self, run_dir: Path | None):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.records = []
        self.artifacts = []
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self.path = self.run_dir / "train_log.jsonl"

    def record(self, rec: dict):
        self.records.append(rec)
        log.info("%s epoch %d: %s", rec["stage"], rec["epoch"],
                 ", ".join(f"{k}={v:.4g}" for k, v in rec["losses"].items()))
        if self.run_dir is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec) + "\n")
            self.add(self.path)

    def add(self, path):
        p = str(path)
        if p not in self.artifacts:
            self.artifacts.append(p)


def _check_sparse(ds: Dataset):
    empty = [i for i in ds.ids if not (ds.sparse[i] != UNLABELED).any()]
    if empty:
        raise ZeroLabeledError(f"samples without any sparse label: {empty[:10]}")


def _train_epoch(state, store, ids, stage, cfg, extra, memory):
    sums, n = {}, 0
    lr = None
    need_a_low = _needs_affinity(stage, cfg)
    for chunk in _batches(state, ids, cfg.train.batch_size):
        batch = _assemble(store, chunk, state, cfg.train.augment, extra, need_a_low)
        terms = compute_losses(state.model, batch, stage, cfg, memory)
        lr = _step(state, terms, cfg)
        for k, v in terms.values.items():
            sums[k] = sums.get(k, 0.0) + float(v.detach())
        sums["total"] = sums.get("total", 0.0) + float(terms.total().detach())
        n += 1
    if memory is not None:
        memory.end_epoch()
    return {k: v / max(n, 1) for k, v in sums.items()}, lr


def _needs_affinity(stage, cfg):
    t, f = cfg.train, cfg.train.ablation
    if stage == INIT:
        return f.use_prsa and f.use_init_prsa and t.lambda1 > 0
    return f.self_training and f.use_prsa and t.lambda3 > 0


def run_initialization(dataset: Dataset, cfg: Config, run_dir=None, state: LoopState | None = None,
                       runlog: RunLog | None = None):
    """Train the preliminary model and emit initial pseudo-labels (``id -> H x W`` uint8)."""
    _check_sparse(dataset)
    t = cfg.train
    if state is None:
        state = make_state(cfg, t.init_epochs, len(dataset))
    runlog = runlog or RunLog(run_dir)
    store = SampleStore(dataset, cfg.affinity)
    ids = list(dataset.ids)
    buffer = PredictionBuffer(t.alpha if t.ablation.use_ema else 1.0)
    memory = PrototypeMemory()
    state.model.train()
    for e in range(1, t.init_epochs + 1):
        state.epoch += 1
        losses, lr = _train_epoch(state, store, ids, INIT, cfg, {}, memory)
        if t.ablation.use_ema or e == t.init_epochs:
            for sid, p in predict_probs(state.model, store, ids):
                buffer.update(sid, p.numpy(), epoch=e)
        runlog.record({"epoch": e, "stage": INIT, "losses": losses, "lr": lr,
                       "denoised_label_dsc": None, "noisy_pixel_fraction": None})
        _maybe_checkpoint(state, cfg, run_dir, INIT, e, runlog)
    labels = buffer.finalize(ids)
    if run_dir is not None:
        run_dir = Path(run_dir)
        ck = save_checkpoint(run_dir / "checkpoints" / "init.pt", state.model, state.epoch, INIT, t.seed)
        runlog.add(ck)
        runlog.add(str(ck) + ".json")
        for p in write_label_dir(run_dir / "pseudo_init", labels):
            runlog.add(p)
    return state.model, labels, state


def _maybe_checkpoint(state, cfg, run_dir, stage, epoch, runlog):
    every = cfg.train.checkpoint_every
    if run_dir is None or not every or epoch % every:
        return
    ck = save_checkpoint(Path(run_dir) / "checkpoints" / f"{stage.lower()}_{epoch:03d}.pt",
                         state.model, state.epoch, stage, cfg.train.seed)
    runlog.add(ck)
    runlog.add(str(ck) + ".json")


@dataclass
class MainResult:
    model: UNet
    labels: dict
    log: list
    dsc_curve: list


def run_main(dataset: Dataset, initial_labels: dict, model, cfg: Config, run_dir=None,
             state: LoopState | None = None, runlog: RunLog | None = None) -> MainResult:
    """Main stage from complete initial pseudo-labels and a model or checkpoint path.

    ``model`` may be a :class:`UNet` or a checkpoint path produced by any method
    with a compatible architecture (plugin mode).
    """
    t, flags = cfg.train, cfg.train.ablation
    if not flags.use_anpm and flags.use_noise_loss and t.lambda4 > 0:
        raise ConfigError("lambda4 > 0 needs noisy regions, but use_anpm is false")
    _check_sparse(dataset)
    missing = [i for i in dataset.ids if i not in initial_labels]
    if missing:
        raise ValueError(f"initial pseudo-labels missing for {missing[:10]}")
    if not isinstance(model, torch.nn.Module):
        model, _ = load_checkpoint(model, UNet(cfg.network))
    if state is None:
        state = make_state(cfg, t.main_epochs, len(dataset), model=model)
    runlog = runlog or RunLog(run_dir)
    store = SampleStore(dataset, cfg.affinity)
    ids = list(dataset.ids)
    c = dataset.num_classes
    labels = {i: torch.from_numpy(to_onehot(initial_labels[i], c)) for i in ids}
    noisy = {i: torch.zeros_like(labels[i]) for i in ids}
    memory = PrototypeMemory()
    snap_dir = Path(run_dir) / "snapshots" if run_dir is not None else None
    curve = []

    def snapshot(epoch):
        index = {i: from_onehot(labels[i]) for i in ids}
        if dataset.dense:
            curve.append(float(np.mean([denoised_label_dsc(index[i], dataset.dense[i], c)
                                        for i in ids if i in dataset.dense])))
        if snap_dir is not None:
            for p in write_label_dir(snap_dir / f"epoch_{epoch:03d}", index):
                runlog.add(p)
        return curve[-1] if dataset.dense else None

    snapshot(0)
    state.model.train()
    for e in range(1, t.main_epochs + 1):
        state.epoch += 1
        extra = {"denoised": labels, "noisy": noisy}
        losses, lr = _train_epoch(state, store, ids, MAIN, cfg, extra, memory)
        noisy_frac = None
        if flags.use_anpm:
            fracs = []
            for sid, pred in _epoch_end_predictions(state.model, store, ids, labels, cfg, memory):
                new, _, m_n = anpm_round(pred, labels[sid])
                labels[sid], noisy[sid] = new, m_n
                fracs.append(float((m_n.sum(0) > 0).float().mean()))
            noisy_frac = float(np.mean(fracs))
        dsc_now = snapshot(e)
        runlog.record({"epoch": e, "stage": MAIN, "losses": losses, "lr": lr,
                       "denoised_label_dsc": dsc_now, "noisy_pixel_fraction": noisy_frac})
        _maybe_checkpoint(state, cfg, run_dir, MAIN, e, runlog)
    final = {i: from_onehot(labels[i]) for i in ids}
    if run_dir is not None:
        ck = save_checkpoint(Path(run_dir) / "checkpoints" / "final.pt", state.model, state.epoch, MAIN, t.seed)
        runlog.add(ck)
        runlog.add(str(ck) + ".json")
    return MainResult(state.model, final, runlog.records, curve)


def _epoch_end_predictions(model, store, ids, labels, cfg, memory):
    """Raw softmax per sample, or the refined prediction when ``anpm_refined`` is set."""
    if not cfg.train.ablation.anpm_refined:
        yield from predict_probs(model, store, ids)
        return
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            for s in range(0, len(ids), cfg.train.batch_size):
                chunk = ids[s:s + cfg.train.batch_size]
                x = torch.stack([store.image[i] for i in chunk])
                res = model(x)
                hi, lo, feats = pixel_embeddings(res.embed_high, res.embed_low, x.shape[-2:])
                lab = torch.stack([labels[i] for i in chunk])
                protos = build_prototypes(hi, lo, lab, cfg.train.prototype_granularity, None)
                yield from zip(chunk, refine_prediction(res.logits, relation_matrix(feats, protos)))
    finally:
        model.train(was)


@dataclass
class FullResult:
    model: UNet
    initial_labels: dict
    main: MainResult | None
    log: list
    param_counts: dict


def run_full(dataset: Dataset, cfg: Config, run_dir=None, model: UNet | None = None,
             runlog: RunLog | None = None) -> FullResult:
    """Initialization then Main on one continuous schedule and data stream."""
    t = cfg.train
    state = make_state(cfg, t.init_epochs + t.main_epochs, len(dataset), model=model)
    runlog = runlog or RunLog(run_dir)
    model, labels, state = run_initialization(dataset, cfg, run_dir, state, runlog)
    counts = {INIT: count_parameters(model)}
    main = None
    if t.main_epochs > 0:
        main = run_main(dataset, labels, model, cfg, run_dir, state, runlog)
        counts[MAIN] = count_parameters(main.model)
    return FullResult(state.model, labels, main, runlog.records, counts)


def train_pce_baseline(dataset: Dataset, cfg: Config, labels: dict | None = None, epochs: int | None = None,
                       model: UNet | None = None) -> UNet:
    """Plain partial cross-entropy training on ``labels`` (default: the sparse labels).

    Uses the same seeds, schedule and augmentation stream as :func:`run_full`.
    """
    t = cfg.train
    epochs = t.init_epochs + t.main_epochs if epochs is None else epochs
    if labels is not None:
        dataset = Dataset(dataset.root, dataset.ids, dataset.num_classes, dataset.images,
                          labels, dataset.dense, dataset.manifest)
    _check_sparse(dataset)
    state = make_state(cfg, epochs, len(dataset), model=model)
    store = SampleStore(dataset, None)
    ids = list(dataset.ids)
    state.model.train()
    for _ in range(epochs):
        for chunk in _batches(state, ids, t.batch_size):
            batch = _assemble(store, chunk, state, t.augment, {}, False)
            prob = torch.softmax(state.model(batch["image"]).logits, dim=1)
            terms = StepTerms({"pce1": pce_loss(prob, batch["sparse"])}, {"pce1": 1.0})
            _step(state, terms, cfg)
    return state.model


def predict_labels(model: UNet, images: dict, ids=None) -> dict:
    ids = list(images) if ids is None else list(ids)
    return {sid: p.argmax(0).numpy().astype(np.uint8) for sid, p in predict_probs(model, images, ids)}


def write_manifest(run_dir, cfg: Config, dataset_hash: str, artifacts, extra=None) -> Path:
    """Append this invocation to ``run_manifest.json`` (entries are never rewritten)."""
    run_dir = Path(run_dir)
    path = run_dir / "run_manifest.json"
    entries = json.loads(path.read_text()) if path.exists() else []
    entry = {
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "dataset_hash": dataset_hash,
        "artifacts": sorted(set(map(str, artifacts))),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        entry.update(extra)
    entries.append(entry)
    path.write_text(json.dumps(entries, indent=2))
    return path


__all__ = [
    "RunLog", "lr_schedule", "run_initialization", "run_main", "run_full", "train_pce_baseline",
    "compute_losses", "predict_labels", "predict_probs", "write_manifest",
]
