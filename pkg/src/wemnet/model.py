"""WEMNet assembly: feature extractor, DIM, SEM, classifier and domain head.

Topology (one shared feature batch ``f`` with source rows first)::

    f ──> DIM ──> classifier                  (source rows only, CE loss)
    f ──> GRL ──> SEM ──> domain head         (all rows, BCE: source=1)

DIM subtracts ``DEC_d(ENC_d(f) * M_d)``; SEM adds ``DEC_c(ENC_c(f) * M~_c)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor, ValidationError, no_grad
from .masks import ClassMask, DomainMask, batch_mask_from_labels, class_mask, domain_mask
from .nn import LinearLayer, MlpBackbone


@dataclass
class MaskSet:
    """Constants for one step: domain mask, class mask, batch mask and target scores."""

    domain: DomainMask
    classes: ClassMask
    batch: Tensor | None = None
    p_t: Tensor | None = None


@dataclass
class ForwardOutputs:
    f: Tensor
    f_hat_d: Tensor
    f_hat_c: Tensor
    class_logits: Tensor
    domain_logits: Tensor
    p_t: Tensor


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    adv: Tensor


def grl_ramp(progress: float) -> float:
    """Warm-up coefficient 2 / (1 + exp(-10 p)) - 1 for training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


class WemnetModel:
    def __init__(
        self,
        d_in: int,
        n_hidden: int = 64,
        n_classes: int = 2,
        depth: int = 2,
        dim_enabled: bool = True,
        sem_enabled: bool = True,
        grl_lambda: float = 1.0,
        per_row_class_threshold: bool = False,
        pseudo_from_dim: bool = True,
        seed: int = 0,
    ):
        if n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {n_classes}")
        self.d_in = d_in
        self.n_hidden = n_hidden
        self.n_classes = n_classes
        self.dim_enabled = dim_enabled
        self.sem_enabled = sem_enabled
        self.grl_lambda = grl_lambda
        self.per_row_class_threshold = per_row_class_threshold
        self.pseudo_from_dim = pseudo_from_dim

        # One child stream per component, so a component's initial weights
        # do not depend on which other components are enabled.
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(7)]
        self.backbone = MlpBackbone(d_in, n_hidden, depth, rng=streams[0])
        self.classifier = LinearLayer(n_hidden, n_classes, use_bias=False, rng=streams[1])
        self.discriminator = LinearLayer(n_hidden, 1, use_bias=False, rng=streams[2])
        self.enc_d = LinearLayer(n_hidden, n_hidden, use_bias=False, rng=streams[3], init="identity")
        self.dec_d = LinearLayer(n_hidden, n_hidden, use_bias=False, rng=streams[4], init="identity")
        self.enc_c = LinearLayer(n_hidden, n_hidden, use_bias=False, rng=streams[5], init="identity")
        self.dec_c = LinearLayer(n_hidden, n_hidden, use_bias=False, rng=streams[6], init="identity")

    # -- parameters --------------------------------------------------------

    def named_parameters(self, active_only: bool = False) -> dict[str, Tensor]:
        out = dict(self.backbone.named_parameters("backbone"))
        out.update(self.classifier.named_parameters("classifier"))
        out.update(self.discriminator.named_parameters("discriminator"))
        if self.dim_enabled or not active_only:
            out.update(self.enc_d.named_parameters("enc_d"))
            out.update(self.dec_d.named_parameters("dec_d"))
        if self.sem_enabled or not active_only:
            out.update(self.enc_c.named_parameters("enc_c"))
            out.update(self.dec_c.named_parameters("dec_c"))
        return out

    def parameters(self) -> list[Tensor]:
        """Parameters that receive gradient under the current module flags."""
        return list(self.named_parameters(active_only=True).values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    # -- masks -------------------------------------------------------------

    def domain_mask(self) -> DomainMask:
        return domain_mask(self.discriminator.weight)

    def class_mask(self) -> ClassMask:
        return class_mask(self.classifier.weight, per_row=self.per_row_class_threshold)

    def pseudo_scores(self, x_t: Tensor | None = None, f_t: Tensor | None = None) -> Tensor:
        """Softmax class scores for target rows; a constant (gradient stopped)."""
        with no_grad():
            if f_t is None:
                f_t = self.features(x_t)
            f_t = ad.stop_gradient(f_t)
            if self.pseudo_from_dim and self.dim_enabled:
                f_t = self.dim_forward(f_t)
            p_t = ad.stop_gradient(ad.softmax_rows(self.classifier(f_t)))
        if not np.isfinite(p_t.data).all():
            raise FloatingPointError("non-finite pseudo-scores; parameters have diverged")
        return p_t

    def compute_masks(self, f: Tensor | None = None, y_s: Tensor | None = None) -> MaskSet:
        """Masks for one step. ``f`` is the full feature batch, source rows first."""
        masks = MaskSet(self.domain_mask(), self.class_mask())
        if self.sem_enabled and f is not None and y_s is not None:
            n_s = y_s.shape[0]
            p_t = self.pseudo_scores(f_t=Tensor(f.data[n_s:]))
            masks.p_t = p_t
            masks.batch = batch_mask_from_labels(masks.classes.mask, y_s, p_t).mask
        return masks

    # -- forward pieces ----------------------------------------------------

    def features(self, x: Tensor) -> Tensor:
        return self.backbone(x)

    def dim_forward(self, f: Tensor, m_d: Tensor | None = None) -> Tensor:
        if m_d is None:
            m_d = self.domain_mask().mask
        return ad.sub(f, self.dec_d(ad.mul(self.enc_d(f), m_d)))

    def sem_forward(self, f: Tensor, m_batch: Tensor) -> Tensor:
        if m_batch.shape != f.shape:
            raise DimensionError(f"SEM mask {m_batch.shape} does not match features {f.shape}")
        return ad.add(f, self.dec_c(ad.mul(self.enc_c(f), m_batch)))

    def class_logits(self, f: Tensor, masks: MaskSet | None = None) -> Tensor:
        """Classifier on the deployed path (through DIM when enabled)."""
        if self.dim_enabled:
            f = self.dim_forward(f, masks.domain.mask if masks is not None else None)
        return self.classifier(f)

    def domain_logits(self, f: Tensor, masks: MaskSet | None = None, reverse: bool = True) -> Tensor:
        h = ad.grad_reverse(f, self.grl_lambda) if reverse else f
        if self.sem_enabled:
            if masks is None or masks.batch is None:
                raise ValidationError("SEM needs a batch class mask (pass masks from compute_masks)")
            h = self.sem_forward(h, masks.batch)
        return self.discriminator(h)

    def classify(self, x: Tensor) -> Tensor:
        return self.class_logits(self.features(x))

    # -- losses ------------------------------------------------------------

    def _cls_from_features(self, f_s: Tensor, y_s: Tensor, masks: MaskSet | None) -> Tensor:
        return ad.cross_entropy(self.class_logits(f_s, masks), y_s)

    def _adv_from_features(self, f: Tensor, n_s: int, masks: MaskSet | None, reverse: bool) -> Tensor:
        n_t = f.shape[0] - n_s
        if n_s == 0 or n_t == 0:
            raise ValidationError("adversarial loss needs nonempty source and target batches")
        labels = Tensor(np.vstack([np.ones((n_s, 1)), np.zeros((n_t, 1))]))
        return ad.binary_cross_entropy_with_logits(self.domain_logits(f, masks, reverse), labels)

    def classification_loss(self, x_s: Tensor, y_s: Tensor, masks: MaskSet | None = None) -> Tensor:
        if x_s.shape[0] != y_s.shape[0]:
            raise ValidationError(f"{x_s.shape[0]} source rows but {y_s.shape[0]} labels")
        return self._cls_from_features(self.features(x_s), y_s, masks)

    def adversarial_loss(
        self,
        x_s: Tensor,
        y_s: Tensor,
        x_t: Tensor,
        masks: MaskSet | None = None,
        reverse: bool = True,
    ) -> Tensor:
        """Domain BCE (source=1, target=0) through GRL and SEM.

        ``reverse=False`` drops the gradient reversal block, for comparison.
        """
        f = self.features(ad.concat_rows(x_s, x_t))
        if masks is None and self.sem_enabled:
            masks = self.compute_masks(f, y_s)
        return self._adv_from_features(f, x_s.shape[0], masks, reverse)

    def losses(self, x_s: Tensor, y_s: Tensor, x_t: Tensor, lam: float = 1.0,
               masks: MaskSet | None = None) -> LossTerms:
        """``L_cls + lam * L_adv`` from one shared feature batch."""
        if x_s.shape[0] != y_s.shape[0]:
            raise ValidationError(f"{x_s.shape[0]} source rows but {y_s.shape[0]} labels")
        n_s = x_s.shape[0]
        f = self.features(ad.concat_rows(x_s, x_t))
        if not np.isfinite(f.data).all():
            raise FloatingPointError("non-finite features; parameters have diverged")
        if masks is None:
            masks = self.compute_masks(f, y_s)
        l_cls = self._cls_from_features(ad.slice_rows(f, 0, n_s), y_s, masks)
        l_adv = self._adv_from_features(f, n_s, masks, reverse=True)
        total = ad.add(l_cls, ad.scale(l_adv, lam))
        return LossTerms(total, l_cls, l_adv)

    def total_loss(self, x_s: Tensor, y_s: Tensor, x_t: Tensor, lam: float = 1.0,
                   masks: MaskSet | None = None) -> Tensor:
        return self.losses(x_s, y_s, x_t, lam, masks).total

    def forward(self, x_s: Tensor, y_s: Tensor, x_t: Tensor, masks: MaskSet | None = None) -> ForwardOutputs:
        f = self.features(ad.concat_rows(x_s, x_t))
        if masks is None:
            masks = self.compute_masks(f, y_s)
        f_hat_d = self.dim_forward(f, masks.domain.mask) if self.dim_enabled else f
        f_rev = ad.grad_reverse(f, self.grl_lambda)
        f_hat_c = self.sem_forward(f_rev, masks.batch) if self.sem_enabled else f_rev
        return ForwardOutputs(
            f=f,
            f_hat_d=f_hat_d,
            f_hat_c=f_hat_c,
            class_logits=self.class_logits(f, masks),
            domain_logits=self.domain_logits(f, masks),
            p_t=masks.p_t,
        )
