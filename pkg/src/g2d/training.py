"""Greedy module-wise training: teacher, encoder, reformer, classifier.

Each stage freezes what came before and checks, by hashing parameter
buffers, that nothing frozen moved. Every random draw comes from a
generator seeded by the stage config, so a rerun reproduces the exact
same parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import losses
from .diffkernel import Graph
from .networks import (Critic, DiscriminativeReformer, FeatureClassifier, GenerativeEncoder,
                       InpaintingDecoder, LinearMap, Module, TeacherRecognizer)
from .optim import SGD, Adam, step_lr
from .synthesis import Dataset, augment_batch

log = logging.getLogger(__name__)

ABLATIONS = ("full", "ce", "dis")


class TrainingError(RuntimeError):
    pass


class FreezeViolation(TrainingError):
    pass


@dataclass
class StageConfig:
    """Optimisation knobs shared by all stages."""

    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lr_step: int = 16
    lr_gamma: float = 0.5
    augment: bool = True
    max_shift: int = 2
    seed: int = 0

    def make_optimizer(self, params):
        if self.optimizer == "sgd":
            return SGD(params, self.lr, self.momentum, self.weight_decay)
        if self.optimizer == "adam":
            return Adam(params, self.lr, (self.beta1, self.beta2))
        raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.lr, epoch, self.lr_gamma, self.lr_step)


@dataclass
class TeacherConfig(StageConfig):
    epochs: int = 30
    lr: float = 0.02
    feat_dim: int = 64
    width: int = 16


@dataclass
class EncoderConfig(StageConfig):
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 3e-3
    beta1: float = 0.5
    beta2: float = 0.9
    weight_decay: float = 0.0
    lr_step: int = 10_000
    grid_channels: int = 32
    width: int = 16
    critic_width: int = 8
    critic_lr: float = 1e-3
    adv_weight: float = 1.0
    gp_weight: float = 1.0
    gp_centered: bool = False


@dataclass
class ReformerConfig(StageConfig):
    epochs: int = 48
    # the distillation terms are sums over the batch, hence the small step
    lr: float = 1e-4
    width: int = 32
    n_blocks: int = 2
    embed_dim: int = 64
    alpha: float = 0.01
    beta: float = 0.02
    huber_delta: float = 1.0
    unmasked_fraction: float = 0.0
    ablation: str = "full"

    def distill_weights(self) -> losses.DistillWeights:
        if self.ablation == "dis":
            return losses.DistillWeights(0.0, 0.0, self.huber_delta)
        return losses.DistillWeights(self.alpha, self.beta, self.huber_delta)


@dataclass
class ClassifierConfig(StageConfig):
    lr: float = 0.1
    ablation: str = "full"


def config_fields(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


# -- helpers -----------------------------------------------------------------

@dataclass
class StageLog:
    stage: str
    term_names: tuple
    rows: list = field(default_factory=list)

    def add(self, epoch: int, total: float, terms) -> None:
        self.rows.append((epoch, total, tuple(float(t) for t in terms)))

    def csv(self) -> str:
        head = ",".join(["epoch", "stage", "loss_total", *self.term_names])
        lines = [head] + [",".join([str(e), self.stage, repr(float(t)), *(repr(x) for x in ts)])
                          for e, t, ts in self.rows]
        return "\n".join(lines) + "\n"


def _stage_rng(cfg: StageConfig, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, salt]))


def _batches(rng, n: int, batch_size: int):
    """Shuffled index batches; the ragged tail is dropped unless it is the only batch."""
    perm = rng.permutation(n)
    nb = max(1, n // batch_size)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


def _augment(rng, cfg: StageConfig, arrays):
    if not cfg.augment:
        return [a.copy() for a in arrays]
    n = len(arrays[0])
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=(n, 2))
    return augment_batch(arrays, flips, shifts)


def _check_finite(value: float, stage: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch}, batch {batch}")


def assert_unchanged(modules, digests, stage: str) -> None:
    for m, d in zip(modules, digests):
        if m.digest() != d:
            raise FreezeViolation(f"{stage}: frozen module {m.name} changed during training")


def _require_frozen(stage: str, *modules: Module) -> None:
    for m in modules:
        if not m.frozen:
            raise TrainingError(f"{stage}: {m.name} must be frozen first")


def forward_batched(fn, n: int, chunk: int = 128) -> np.ndarray:
    return np.concatenate([fn(slice(i, min(n, i + chunk))) for i in range(0, n, chunk)])


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- stage 0: teacher --------------------------------------------------------

@dataclass
class TeacherResult:
    teacher: TeacherRecognizer
    log: StageLog
    train_acc: float
    val_acc: float
    warnings: list


def teacher_logits(teacher: TeacherRecognizer, images: np.ndarray) -> np.ndarray:
    return forward_batched(lambda s: teacher.logits(Graph(), images[s]).value, len(images))


def teacher_features(teacher: TeacherRecognizer, images: np.ndarray) -> np.ndarray:
    return forward_batched(lambda s: teacher.features(Graph(), images[s]).value, len(images))


def train_teacher(ds: Dataset, cfg: TeacherConfig) -> TeacherResult:
    """Train a face classifier on unmasked training faces, then freeze it."""
    train, val = ds.subset("train"), ds.subset("val")
    teacher = TeacherRecognizer(ds.n_identities, cfg.feat_dim, cfg.width, ds.faces.shape[-1], cfg.seed)
    opt = cfg.make_optimizer(teacher.parameters())
    rng = _stage_rng(cfg, 10)
    slog = StageLog("teacher", ("ce",))
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        total = []
        for b, idx in enumerate(_batches(rng, len(train), cfg.batch_size)):
            (x,) = _augment(rng, cfg, (train.faces[idx],))
            g = Graph()
            loss = g.softmax_cross_entropy(teacher.logits(g, x), train.identity[idx])
            _check_finite(float(loss.value), "teacher", epoch, b)
            opt.zero_grad()
            g.backward(loss)
            opt.step()
            total.append(float(loss.value))
        slog.add(epoch, np.mean(total), [np.mean(total)])
    teacher.freeze()
    train_acc = accuracy(teacher_logits(teacher, train.faces), train.identity)
    val_acc = accuracy(teacher_logits(teacher, val.faces), val.identity) if len(val) else float("nan")
    warnings = []
    chance = 1.0 / ds.n_identities
    if not val_acc >= 1.5 * chance:
        warnings.append(f"teacher too weak: val accuracy {val_acc:.3f} < 1.5x chance")
        log.warning(warnings[-1])
    log.info("teacher: train acc %.3f, val acc %.3f", train_acc, val_acc)
    return TeacherResult(teacher, slog, train_acc, val_acc, warnings)


# -- stage 1: generative encoder --------------------------------------------

@dataclass
class EncoderResult:
    encoder: GenerativeEncoder
    decoder: InpaintingDecoder
    critic: Critic
    log: StageLog
    val_rec_initial: float
    val_rec_final: float
    val_unmasked_mae: float


def reconstruct(encoder, decoder, images, masks) -> np.ndarray:
    def run(s):
        g = Graph()
        return decoder.forward(g, encoder.forward(g, images[s], masks[s])).value
    return forward_batched(run, len(images))


def reconstruction_error(encoder, decoder, ds: Dataset):
    """(mean per-image reconstruction loss, per-pixel MAE on unmasked pixels)."""
    rec = reconstruct(encoder, decoder, ds.masked, ds.masks)
    per_image = np.sum((rec - ds.faces) ** 2, axis=(1, 2, 3))
    keep = np.broadcast_to((1.0 - ds.masks)[:, None], rec.shape)
    mae = float(np.sum(np.abs(rec - ds.faces) * keep) / keep.sum())
    return float(per_image.mean()), mae


def pretrain_encoder(ds: Dataset, cfg: EncoderConfig, teacher: TeacherRecognizer | None = None
                     ) -> EncoderResult:
    """Inpainting pretraining: reconstruction plus WGAN-GP generator loss, 1:1 critic steps."""
    if teacher is not None:
        _require_frozen("encoder", teacher)
        teacher_digest = teacher.digest()
    train, val = ds.subset("train"), ds.subset("val")
    size = ds.faces.shape[-1]
    encoder = GenerativeEncoder(cfg.grid_channels, cfg.width, cfg.seed)
    decoder = InpaintingDecoder(cfg.grid_channels, cfg.width, cfg.seed)
    critic = Critic(cfg.critic_width, size, cfg.seed)
    gen_opt = cfg.make_optimizer(encoder.parameters() + decoder.parameters())
    crit_opt = Adam(critic.parameters(), cfg.critic_lr, (cfg.beta1, cfg.beta2))
    rng = _stage_rng(cfg, 20)
    rec0, _ = reconstruction_error(encoder, decoder, val)
    slog = StageLog("encoder", ("reconstruction", "generator_adv", "critic"))
    for epoch in range(cfg.epochs):
        gen_opt.lr = cfg.lr_at(epoch)
        acc = np.zeros(4)
        batches = _batches(rng, len(train), cfg.batch_size)
        for b, idx in enumerate(batches):
            face, masked, mask = _augment(rng, cfg, (train.faces[idx], train.masked[idx], train.masks[idx]))
            g = Graph()
            pred = decoder.forward(g, encoder.forward(g, masked, mask))
            # critic step on the detached reconstruction
            gc = Graph()
            c_loss = losses.critic_loss(gc, critic, face, pred.value, cfg.gp_weight, rng, cfg.gp_centered)
            _check_finite(float(c_loss.value), "encoder/critic", epoch, b)
            crit_opt.zero_grad()
            gc.backward(c_loss)
            crit_opt.step()
            # generator step against the updated critic
            rec = losses.reconstruction_loss(g, pred, face)
            adv = losses.generator_loss(g, critic, pred)
            total = g.combine([(rec, 1.0), (adv, cfg.adv_weight)])
            _check_finite(float(total.value), "encoder", epoch, b)
            gen_opt.zero_grad()
            g.backward(total)
            gen_opt.step()
            acc += [float(total.value), float(rec.value), float(adv.value), float(c_loss.value)]
        acc /= len(batches)
        slog.add(epoch, acc[0], acc[1:])
    critic.zero_grad()
    encoder.freeze()
    decoder.freeze()
    critic.freeze()
    if teacher is not None:
        assert_unchanged([teacher], [teacher_digest], "encoder")
    rec1, mae = reconstruction_error(encoder, decoder, val)
    log.info("encoder: val reconstruction %.2f -> %.2f, unmasked MAE %.4f", rec0, rec1, mae)
    return EncoderResult(encoder, decoder, critic, slog, rec0, rec1, mae)


def encode(encoder: GenerativeEncoder, images: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return forward_batched(lambda s: encoder.forward(Graph(), images[s], masks[s]).value, len(images))


# -- stage 2: discriminative reformer ---------------------------------------

@dataclass
class ReformerResult:
    reformer: DiscriminativeReformer
    projection: LinearMap
    log: StageLog
    step_losses: list


def _student_inputs(rng, cfg: ReformerConfig, masked, masks, faces):
    """Optionally swap a fraction of items for their unmasked originals with zero masks."""
    if cfg.unmasked_fraction <= 0:
        return masked, masks
    swap = rng.random(len(masked)) < cfg.unmasked_fraction
    masked = np.where(swap[:, None, None, None], faces, masked)
    masks = np.where(swap[:, None, None], 0.0, masks)
    return masked, masks


def train_reformer(ds: Dataset, teacher: TeacherRecognizer, encoder: GenerativeEncoder,
                   cfg: ReformerConfig) -> ReformerResult:
    """Distil teacher relations on unmasked faces into the reformer on masked faces."""
    if cfg.ablation not in ("full", "dis"):
        raise TrainingError(f"train_reformer does not run ablation {cfg.ablation!r}")
    _require_frozen("reformer", teacher, encoder)
    digests = [teacher.digest(), encoder.digest()]
    train = ds.subset("train")
    weights = cfg.distill_weights()
    reformer = DiscriminativeReformer(encoder.config["grid_channels"], cfg.width, cfg.n_blocks,
                                      cfg.embed_dim, cfg.seed)
    proj = LinearMap("projection", cfg.embed_dim, teacher.config["feat_dim"], cfg.seed)
    opt = cfg.make_optimizer(reformer.parameters() + proj.parameters())
    rng = _stage_rng(cfg, 30)
    slog = StageLog("reformer", ("l1", "l2", "l3"))
    step_losses = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        acc = np.zeros(4)
        batches = _batches(rng, len(train), cfg.batch_size)
        for b, idx in enumerate(batches):
            for attempt in range(4):
                face, masked, mask = _augment(
                    rng, cfg, (train.faces[idx], train.masked[idx], train.masks[idx]))
                masked, mask = _student_inputs(rng, cfg, masked, mask, face)
                t = teacher.features(Graph(), face).value
                grid = encoder.forward(Graph(), masked, mask).value
                g = Graph()
                s = reformer.forward(g, grid)
                try:
                    terms = losses.distill_loss(g, t, s, proj.weight, proj.bias, weights)
                    break
                except losses.DegenerateBatchError as exc:
                    if attempt == 3:
                        raise TrainingError(f"reformer: degenerate batch {b} after 3 retries") from exc
                    idx = rng.choice(len(train), size=len(idx), replace=False)
            total = float(terms.total.value)
            _check_finite(total, "reformer", epoch, b)
            opt.zero_grad()
            g.backward(terms.total)
            opt.step()
            step_losses.append((total, terms.l1, terms.l2, terms.l3))
            acc += [total, terms.l1, terms.l2, terms.l3]
        acc /= len(batches)
        slog.add(epoch, acc[0], acc[1:])
    reformer.freeze()
    proj.freeze()
    assert_unchanged([teacher, encoder], digests, "reformer")
    return ReformerResult(reformer, proj, slog, step_losses)


def embed(encoder: GenerativeEncoder, reformer: DiscriminativeReformer, images: np.ndarray,
          masks: np.ndarray | None = None) -> np.ndarray:
    """Reformed embeddings; ``masks=None`` means unmasked input (all-zero mask)."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
        masks = None if masks is None else np.asarray(masks)[None]
    if masks is None:
        masks = np.zeros((images.shape[0],) + images.shape[2:])
    if images.shape[1] != 3 or masks.shape != (images.shape[0],) + images.shape[2:]:
        raise ValueError(f"image batch {images.shape} and masks {masks.shape} do not conform")

    def run(s):
        g = Graph()
        return reformer.forward(g, encoder.forward(g, images[s], masks[s])).value

    out = forward_batched(run, len(images))
    return out[0] if single else out


# -- stage 3: classifier -----------------------------------------------------

@dataclass
class ClassifierResult:
    classifier: FeatureClassifier
    log: StageLog
    train_acc: float
    val_acc: float
    reformer: DiscriminativeReformer | None = None


def _classifier_accuracy(encoder, reformer, classifier, part: Dataset) -> float:
    if not len(part):
        return float("nan")
    z = embed(encoder, reformer, part.masked, part.masks)
    return accuracy(classifier.forward(Graph(), z).value, part.identity)


def finetune_classifier(ds: Dataset, encoder: GenerativeEncoder, reformer: DiscriminativeReformer,
                        cfg: ClassifierConfig) -> ClassifierResult:
    """Train only the classifier on frozen reformed embeddings of masked faces."""
    _require_frozen("classifier", encoder, reformer)
    digests = [encoder.digest(), reformer.digest()]
    train, val = ds.subset("train"), ds.subset("val")
    clf = FeatureClassifier(reformer.config["embed_dim"], ds.n_identities, cfg.seed)
    opt = cfg.make_optimizer(clf.parameters())
    rng = _stage_rng(cfg, 40)
    slog = StageLog("classifier", ("ce",))
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        losses_ = []
        for b, idx in enumerate(_batches(rng, len(train), cfg.batch_size)):
            masked, mask = _augment(rng, cfg, (train.masked[idx], train.masks[idx]))
            z = embed(encoder, reformer, masked, mask)
            g = Graph()
            loss = g.softmax_cross_entropy(clf.forward(g, z), train.identity[idx])
            _check_finite(float(loss.value), "classifier", epoch, b)
            opt.zero_grad()
            g.backward(loss)
            opt.step()
            losses_.append(float(loss.value))
        slog.add(epoch, np.mean(losses_), [np.mean(losses_)])
    clf.freeze()
    assert_unchanged([encoder, reformer], digests, "classifier")
    return ClassifierResult(clf, slog, _classifier_accuracy(encoder, reformer, clf, train),
                            _classifier_accuracy(encoder, reformer, clf, val))


def train_ce_baseline(ds: Dataset, encoder: GenerativeEncoder, rcfg: ReformerConfig,
                      ccfg: ClassifierConfig) -> ClassifierResult:
    """Ablation: reformer and classifier trained jointly from scratch with cross-entropy only.

    Architecture, epochs, batching and augmentation follow the reformer
    stage; the optimiser follows the classifier stage, whose loss has the
    same mean reduction.
    """
    _require_frozen("classifier[ce]", encoder)
    digest = encoder.digest()
    train, val = ds.subset("train"), ds.subset("val")
    reformer = DiscriminativeReformer(encoder.config["grid_channels"], rcfg.width, rcfg.n_blocks,
                                      rcfg.embed_dim, rcfg.seed)
    clf = FeatureClassifier(rcfg.embed_dim, ds.n_identities, ccfg.seed)
    opt = ccfg.make_optimizer(reformer.parameters() + clf.parameters())
    rng = _stage_rng(rcfg, 50)
    slog = StageLog("classifier_ce", ("ce",))
    for epoch in range(rcfg.epochs):
        opt.lr = ccfg.lr_at(epoch)
        losses_ = []
        for b, idx in enumerate(_batches(rng, len(train), rcfg.batch_size)):
            face, masked, mask = _augment(
                rng, rcfg, (train.faces[idx], train.masked[idx], train.masks[idx]))
            masked, mask = _student_inputs(rng, rcfg, masked, mask, face)
            grid = encoder.forward(Graph(), masked, mask).value
            g = Graph()
            loss = g.softmax_cross_entropy(clf.forward(g, reformer.forward(g, grid)),
                                           train.identity[idx])
            _check_finite(float(loss.value), "classifier[ce]", epoch, b)
            opt.zero_grad()
            g.backward(loss)
            opt.step()
            losses_.append(float(loss.value))
        slog.add(epoch, np.mean(losses_), [np.mean(losses_)])
    reformer.freeze()
    clf.freeze()
    assert_unchanged([encoder], [digest], "classifier[ce]")
    return ClassifierResult(clf, slog, _classifier_accuracy(encoder, reformer, clf, train),
                            _classifier_accuracy(encoder, reformer, clf, val), reformer)


def with_seed(cfg, seed: int):
    return replace(cfg, seed=seed)
