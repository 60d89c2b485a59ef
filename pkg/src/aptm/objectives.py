"""Pre-training objectives: ITC/ITM/MLM on captions, IAC/IAM/MAM on attribute prompts."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .attributes.space import UNKNOWN
from .attributes.tokenizer import MASK, PAD, SPECIALS
from .encoders import APTM, trim_padding
from .numcore import ContractError, Tensor

log = logging.getLogger(__name__)

FIRST_WORD_ID = len(SPECIALS)


# -- masking ----------------------------------------------------------------

@dataclass
class MaskRecords:
    rows: np.ndarray
    cols: np.ndarray
    originals: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


def mask_tokens(ids: np.ndarray, rng: np.random.Generator, vocab_size: int, prob: float = 0.25,
                mask_frac: float = 0.8, random_frac: float = 0.1) -> tuple[np.ndarray, MaskRecords]:
    """Select each word token with ``prob``; of those, ``mask_frac`` become [MASK],
    ``random_frac`` a random word id, the rest stay as they are.

    Special tokens ([PAD], [CLS], [UNK], [MASK]) are never selected. Draws are
    made for every position so the outcome depends only on ``ids.shape`` and
    the generator state.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        masked, rec = mask_tokens(ids[None], rng, vocab_size, prob, mask_frac, random_frac)
        return masked[0], rec
    eligible = ids >= FIRST_WORD_ID
    select_u = rng.random(ids.shape)
    action_u = rng.random(ids.shape)
    replacement = rng.integers(FIRST_WORD_ID, max(vocab_size, FIRST_WORD_ID + 1), size=ids.shape)
    selected = eligible & (select_u < prob)
    to_mask = selected & (action_u < mask_frac)
    to_random = selected & (action_u >= mask_frac) & (action_u < mask_frac + random_frac)
    out = ids.copy()
    out[to_mask] = MASK
    out[to_random] = replacement[to_random]
    rows, cols = np.nonzero(selected)
    return out, MaskRecords(rows, cols, ids[rows, cols])


# -- scores and losses ------------------------------------------------------

def _check_tau(tau) -> None:
    t = tau.data if isinstance(tau, Tensor) else np.asarray(tau)
    if np.any(t <= 0):
        raise ContractError("temperature must be positive")


def iac_score(s_pos, s_neg, tau) -> Tensor:
    """Two-way softmax of the true prompt against its opposite."""
    _check_tau(tau)
    s_pos = s_pos if isinstance(s_pos, Tensor) else nc.tensor(s_pos)
    s_neg = s_neg if isinstance(s_neg, Tensor) else nc.tensor(s_neg)
    return nc.sigmoid((s_pos - s_neg) / tau)


def iac_loss(f_img: Tensor, f_pos: Tensor, f_neg: Tensor, tau) -> Tensor:
    """-mean log S_i2a over matched (image, prompt) pairs; rows are unit-norm features."""
    _check_tau(tau)
    if f_img.shape[0] == 0:
        log.warning("IAC: batch has no known attributes; contributing 0")
        return nc.zeros(())
    s_pos = (f_img * f_pos).sum(axis=-1)
    s_neg = (f_img * f_neg).sum(axis=-1)
    return -nc.log_sigmoid((s_pos - s_neg) / tau).mean()


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """-mean[y log p + (1-y) log(1-p)] with p = sigmoid(logits)."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if logits.shape[0] == 0:
        return nc.zeros(())
    return -(nc.log_sigmoid(logits) * y + nc.log_sigmoid(-logits) * (1.0 - y)).mean()


def iam_loss(logits: Tensor, targets) -> Tensor:
    return bce_with_logits(logits, targets)


def itm_loss(logits: Tensor, targets) -> Tensor:
    return bce_with_logits(logits, targets)


def smooth_targets(y, eps: float = 0.1) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * (1.0 - eps) + eps / 2.0


def masked_lm_loss(logits: Tensor, originals) -> Tensor:
    """Mean cross-entropy at masked positions; 0 when nothing was masked."""
    originals = np.asarray(originals, dtype=np.int64)
    if originals.size == 0:
        return nc.zeros(())
    return nc.cross_entropy(logits, originals)


mam_loss = masked_lm_loss
mlm_loss = masked_lm_loss


def itc_loss(f_img: Tensor, f_txt: Tensor, tau) -> Tensor:
    """Symmetric in-batch contrastive loss over a (B, B) similarity matrix."""
    _check_tau(tau)
    b = f_img.shape[0]
    sim = (f_img @ f_txt.swapaxes(0, 1)) / tau
    diag = (np.arange(b), np.arange(b))
    i2t = nc.log_softmax(sim, axis=1)[diag]
    t2i = nc.log_softmax(sim, axis=0)[diag]
    return -(i2t.sum() + t2i.sum()) * (1.0 / (2 * b))


def mine_hard_negatives(s_t2i: np.ndarray, s_i2t: np.ndarray):
    """Highest-similarity unpaired image per text and unpaired text per image.

    ``s_t2i[j, i]`` scores text j against image i, ``s_i2t[i, j]`` image i against
    text j. Ties go to the lowest index. Returns ``(neg_image_for_text,
    neg_text_for_image)`` or ``None`` when the batch has a single pair.
    """
    s_t2i = np.array(s_t2i, dtype=np.float64)
    s_i2t = np.array(s_i2t, dtype=np.float64)
    b = s_t2i.shape[0]
    if b < 2:
        log.warning("ITM: batch of one pair has no negatives; skipping")
        return None
    np.fill_diagonal(s_t2i, -np.inf)
    np.fill_diagonal(s_i2t, -np.inf)
    return np.argmax(s_t2i, axis=1), np.argmax(s_i2t, axis=1)


# -- attribute pair sampling -------------------------------------------------

@dataclass
class IamPairs:
    image: np.ndarray
    prompt: np.ndarray  # index into the 2*|A| prompt list
    target: np.ndarray  # 1 matched, 0 opposite prompt
    soft_target: np.ndarray

    def __len__(self) -> int:
        return len(self.image)


def matched_pairs(attrs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(image index, matched prompt index) for every known attribute value."""
    attrs = np.asarray(attrs)
    img, attr = np.nonzero(attrs != UNKNOWN)
    return img, 2 * attr + attrs[img, attr].astype(np.int64)


def sample_iam_pairs(attrs: np.ndarray, rng: np.random.Generator, per_image: int = 5,
                     smoothing: float = 0.1) -> IamPairs:
    attrs = np.asarray(attrs)
    images, prompts, targets = [], [], []
    for i, row in enumerate(attrs):
        known = np.nonzero(row != UNKNOWN)[0]
        if known.size == 0:
            log.info("IAM: image %d has no known attributes; excluded", i)
            continue
        chosen = rng.choice(known, size=per_image, replace=known.size < per_image)
        coins = rng.random(per_image) < 0.5
        for a, matched in zip(chosen, coins):
            value = int(row[a]) if matched else 1 - int(row[a])
            images.append(i)
            prompts.append(2 * int(a) + value)
            targets.append(1.0 if matched else 0.0)
    target = np.asarray(targets, dtype=np.float64)
    return IamPairs(np.asarray(images, dtype=np.int64), np.asarray(prompts, dtype=np.int64),
                    target, smooth_targets(target, smoothing))


# -- combined ---------------------------------------------------------------

COMPONENTS = ("itc", "itm", "mlm", "iac", "iam", "mam")


@dataclass
class LossReport:
    itc: float = 0.0
    itm: float = 0.0
    mlm: float = 0.0
    iac: float = 0.0
    iam: float = 0.0
    mam: float = 0.0
    apl: float = 0.0
    total: float = 0.0
    tau: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self, **context) -> str:
        row = dict(context)
        row.update({k: v for k, v in asdict(self).items() if k != "extra"})
        row.update(self.extra)
        return json.dumps(row, sort_keys=False)


def total_loss(parts: dict, beta: float = 0.8, mode: str = "pretrain"):
    """TML sum plus ``beta`` times the mean APL loss; finetune drops the APL term."""
    tml = parts["itc"] + parts["itm"] + parts["mlm"]
    apl = (parts["iac"] + parts["iam"] + parts["mam"]) * (1.0 / 3.0)
    if mode == "finetune":
        return tml, apl
    return tml + apl * beta, apl


@dataclass
class Batch:
    pixels: np.ndarray  # (B, 3, H, W)
    ids: np.ndarray  # (B, T)
    attrs: np.ndarray | None = None  # (B, |A|) int8, -1 unknown

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class StepRandomness:
    """Generators for the stochastic sites of one step."""

    text_mask: np.random.Generator
    prompt_mask: np.random.Generator
    iam: np.random.Generator

    @classmethod
    def for_step(cls, seed: int, step: int) -> "StepRandomness":
        return cls(nc.RngStream.named(seed, "mask/text").generator(step),
                   nc.RngStream.named(seed, "mask/prompt").generator(step),
                   nc.RngStream.named(seed, "iam").generator(step))


def compute_losses(model: APTM, batch: Batch, prompt_ids: np.ndarray | None, rand: StepRandomness,
                   beta: float = 0.8, mode: str = "pretrain", mask_prob: float = 0.25,
                   smoothing: float = 0.1) -> tuple[Tensor, dict, LossReport]:
    """Forward every objective on one batch.

    Returns the scalar loss to optimize, the per-objective tensors and a
    float report. ``prompt_ids`` holds the tokenized 2*|A| attribute prompts.
    """
    vocab = model.cfg.text.vocab_size
    ids = trim_padding(batch.ids)
    b = len(ids)
    tau = model.tau()

    V = model.encode_image(batch.pixels)
    L = model.encode_text(ids)
    f_img = model.project_image(V[:, 0])
    f_txt = model.project_text(L[:, 0])
    parts: dict[str, Tensor] = {"itc": itc_loss(f_img, f_txt, tau)}

    # ITM on positives plus mined hard negatives
    with nc.no_grad():
        sim = f_img.data @ f_txt.data.T / tau.data
        s_i2t = nc.softmax(nc.Tensor(sim), axis=1).data
        s_t2i = nc.softmax(nc.Tensor(sim.T), axis=1).data
    negs = mine_hard_negatives(s_t2i, s_i2t)
    if negs is None:
        parts["itm"] = nc.zeros(())
    else:
        neg_img, neg_txt = negs
        ar = np.arange(b)
        img_idx = np.concatenate([ar, neg_img, ar])
        txt_idx = np.concatenate([ar, ar, neg_txt])
        targets = np.concatenate([np.ones(b), np.zeros(2 * b)])
        C = model.encode_cross(V, L[txt_idx], ids[txt_idx], image_index=img_idx)
        parts["itm"] = itm_loss(model.match_logit(C[:, 0]), targets)

    # MLM
    masked, rec = mask_tokens(ids, rand.text_mask, vocab, mask_prob)
    if len(rec):
        L_hat = model.encode_text(masked)
        C_hat = model.encode_cross(V, L_hat, masked)
        parts["mlm"] = mlm_loss(model.mask_logits(C_hat[rec.rows, rec.cols]), rec.originals)
    else:
        parts["mlm"] = nc.zeros(())

    n_iac = n_iam = n_mam = 0
    use_apl = mode == "pretrain" and batch.attrs is not None and prompt_ids is not None
    if use_apl:
        prompt_ids = trim_padding(prompt_ids)
        L_A = model.encode_text(prompt_ids)
        f_att = model.project_text(L_A[:, 0])
        img, pos = matched_pairs(batch.attrs)
        neg = pos ^ 1
        n_iac = len(img)
        parts["iac"] = iac_loss(f_img[img], f_att[pos], f_att[neg], tau)

        pairs = sample_iam_pairs(batch.attrs, rand.iam, smoothing=smoothing)
        n_iam = len(pairs)
        if n_iam:
            C_a = model.encode_cross(V, L_A[pairs.prompt], prompt_ids[pairs.prompt], image_index=pairs.image)
            parts["iam"] = iam_loss(model.match_logit(C_a[:, 0]), pairs.soft_target)
        else:
            parts["iam"] = nc.zeros(())

        masked_p, prec = mask_tokens(prompt_ids[pos], rand.prompt_mask, vocab, mask_prob)
        keep = np.unique(prec.rows)
        n_mam = len(prec)
        if keep.size:
            remap = np.full(len(pos), -1)
            remap[keep] = np.arange(keep.size)
            sub = masked_p[keep]
            L_hat_a = model.encode_text(sub)
            C_hat_a = model.encode_cross(V, L_hat_a, sub, image_index=img[keep])
            parts["mam"] = mam_loss(model.mask_logits(C_hat_a[remap[prec.rows], prec.cols]), prec.originals)
        else:
            parts["mam"] = nc.zeros(())
    else:
        for k in ("iac", "iam", "mam"):
            parts[k] = nc.zeros(())

    total, apl = total_loss(parts, beta, mode)
    report = LossReport(**{k: float(parts[k].item()) for k in COMPONENTS},
                        apl=float(apl.item()), total=float(total.item()), tau=float(tau.item()),
                        extra={"n_iac": n_iac, "n_iam": n_iam, "n_mam": n_mam, "n_mlm": len(rec)})
    return total, parts, report
