"""Dual toy encoder and the combined training objective with its backward pass."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from otat.blocks import ConfigError, block_backward, block_forward, init_block
from otat.losses import LossWeights, loss_cos, loss_eaw, loss_ota, loss_total, update_prototypes
from otat.numeric import l2_normalize_rows, l2_normalize_rows_backward, make_rng
from otat.transport import CostKind, SinkhornConfig, pairwise_costs, pairwise_costs_backward, sinkhorn

__all__ = ["Arm", "DualEncoder", "Objective", "pool", "pool_backward"]


class Arm(str, Enum):
    BASELINE = "Baseline"
    OTO = "OTO"
    OTA_OTO = "OTA_OTO"
    OTA_OTO_EAW = "OTA_OTO_EAW"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for arm in cls:
            if str(value).replace("+", "_").upper() == arm.value.upper():
                return arm
        raise ConfigError(f"unknown ablation arm {value!r}; expected one of {[a.value for a in cls]}")

    @property
    def uses_ot_loss(self):
        return self is not Arm.BASELINE

    @property
    def cross_modal(self):
        return self in (Arm.OTA_OTO, Arm.OTA_OTO_EAW)

    @property
    def uses_eaw(self):
        return self is Arm.OTA_OTO_EAW


def pool(tokens):
    """Mean over tokens then unit-normalize: (..., L, D) -> (..., D)."""
    mean = tokens.mean(axis=-2)
    unit, norms = l2_normalize_rows(mean, return_norms=True)
    return unit, (unit, norms, tokens.shape[-2])


def pool_backward(dunit, cache):
    unit, norms, length = cache
    dmean = l2_normalize_rows_backward(dunit, unit, norms)
    return np.repeat(dmean[..., None, :], length, axis=-2) / length


class DualEncoder:
    """Stacks of vision and text blocks sharing one token width."""

    def __init__(self, vision_blocks, text_blocks):
        self.vision_blocks = list(vision_blocks)
        self.text_blocks = list(text_blocks)

    @classmethod
    def build(cls, dim, n_blocks=2, cmam_start_layer=None, rank=8, alpha=1.0, gamma=1.0, beta=1.0,
              activation="gelu", seed=0, adapter_init="zero_up", cmam_value_init="identity"):
        """Fresh encoder; ``cmam_start_layer`` is 1-based, ``None`` for no cross-modal blocks."""
        if cmam_start_layer is not None and not 1 <= cmam_start_layer <= n_blocks:
            raise ConfigError(f"cmam_start_layer must lie in [1, {n_blocks}]")
        common = dict(rank=rank, alpha=alpha, gamma=gamma, beta=beta, activation=activation,
                      adapter_init=adapter_init, cmam_value_init=cmam_value_init)
        vision = [
            init_block(make_rng(seed, f"vision.{i}.backbone"), make_rng(seed, f"vision.{i}.side"), dim, **common)
            for i in range(n_blocks)
        ]
        text = []
        for i in range(n_blocks):
            cross = cmam_start_layer is not None and i + 1 >= cmam_start_layer
            text.append(init_block(make_rng(seed, f"text.{i}.backbone"), make_rng(seed, f"text.{i}.side"), dim,
                                   cross_modal=cross, **common))
        return cls(vision, text)

    def trainable(self):
        out = {}
        for prefix, blocks in (("vision", self.vision_blocks), ("text", self.text_blocks)):
            for i, blk in enumerate(blocks):
                for name, arr in blk.trainable().items():
                    out[f"{prefix}.{i}.{name}"] = arr
        return out

    def frozen(self):
        out = {}
        for prefix, blocks in (("vision", self.vision_blocks), ("text", self.text_blocks)):
            for i, blk in enumerate(blocks):
                for name, arr in blk.frozen().items():
                    out[f"{prefix}.{i}.{name}"] = arr
        return out

    @property
    def cross_modal(self):
        return any(b.is_cross_modal for b in self.text_blocks)

    def encode_images(self, x):
        caches = []
        for blk in self.vision_blocks:
            x, cache = block_forward(x, blk)
            caches.append(cache)
        return x, caches

    def encode_text(self, text, images_by_class=None):
        """Encode every class text; ``images_by_class[c]`` feeds class ``c``'s cross-modal blocks."""
        if self.cross_modal and images_by_class is None:
            raise ConfigError("cross-modal text blocks need support images per class")
        outputs, caches = [], []
        for c in range(text.shape[0]):
            x = text[c]
            class_caches = []
            for blk in self.text_blocks:
                imgs = images_by_class[c] if blk.is_cross_modal else None
                x, cache = block_forward(x, blk, images=imgs)
                class_caches.append(cache)
            outputs.append(x)
            caches.append(class_caches)
        return np.stack(outputs), caches

    def backward_images(self, dv, caches, grads):
        for i in reversed(range(len(self.vision_blocks))):
            dv, g, _ = block_backward(dv, caches[i])
            _accumulate(grads, f"vision.{i}", g)
        return dv

    def backward_text(self, dt, caches, grads):
        """Backpropagate per-class text gradients; returns image gradients per class."""
        dimages = []
        for c, class_caches in enumerate(caches):
            d = dt[c]
            dimg = None
            for i in reversed(range(len(self.text_blocks))):
                d, g, di = block_backward(d, class_caches[i])
                _accumulate(grads, f"text.{i}", g)
                if di is not None:
                    dimg = di if dimg is None else dimg + di
            dimages.append(dimg)
        return dimages


def _accumulate(grads, prefix, g):
    for name, value in g.items():
        key = f"{prefix}.{name}"
        if key in grads:
            grads[key] = grads[key] + value
        else:
            grads[key] = value


@dataclass
class Objective:
    """Which loss terms are active and how they are weighted."""

    arm: Arm = Arm.OTA_OTO_EAW
    weights: LossWeights = field(default_factory=LossWeights)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    cost: CostKind = CostKind.COSINE

    def __post_init__(self):
        self.arm = Arm.parse(self.arm)
        self.cost = CostKind.parse(self.cost)

    def solve_plans(self, costs):
        return sinkhorn(costs, cfg=self.sinkhorn)

    def evaluate(self, net, x, y, text, bank=None, update_bank=False, plans=None, loss_rows=None, with_grad=True,
                 only=None):
        """Loss terms, trainable gradients and the constants used.

        ``x`` holds all support images (N, L1, D); ``loss_rows`` selects the
        minibatch whose losses are computed (default: all rows). Every support
        image still conditions the cross-modal blocks. ``plans`` and ``bank``
        are treated as constants; when ``plans`` is None they are solved from
        the current costs, and when ``update_bank`` is set the bank first
        absorbs the current (detached) minibatch embeddings.

        Returns ``(terms, grads, aux)``, where ``aux`` carries ``plans``,
        ``bank`` and the solver result. ``grads`` belong to ``terms["total"]``,
        or to the single unweighted term named by ``only`` (``"l_cos"``,
        ``"l_ota"`` or ``"l_eaw"``).
        """
        w = self.weights
        if only is None:
            coef = {"l_cos": 1.0, "l_ota": w.xi, "l_eaw": w.nu}
        elif only in ("l_cos", "l_ota", "l_eaw"):
            coef = {k: float(k == only) for k in ("l_cos", "l_ota", "l_eaw")}
        else:
            raise ConfigError(f"unknown loss term {only!r}")
        n_classes = text.shape[0]
        rows = np.arange(x.shape[0]) if loss_rows is None else np.asarray(loss_rows)
        yb = y[rows]

        v, vcaches = net.encode_images(x)
        groups = [np.flatnonzero(y == c) for c in range(n_classes)]
        images_by_class = [v[g] for g in groups] if net.cross_modal else None
        t, tcaches = net.encode_text(text, images_by_class)

        vb = v[rows]
        g_img, img_pool = pool(vb)
        g_txt, txt_pool = pool(t)

        l_cos, dg_img, dg_txt = loss_cos(g_img, g_txt, yb, w.tau)
        dg_img = coef["l_cos"] * dg_img
        dg_txt = coef["l_cos"] * dg_txt
        dcost = None
        l_ota = 0.0
        solve = None
        if self.arm.uses_ot_loss:
            costs, cost_cache = pairwise_costs(vb, t, self.cost)
            if plans is None:
                solve = self.solve_plans(costs)
                plans = solve.plan
            distances = (plans * costs).sum(axis=(-2, -1))
            l_ota, ddist = loss_ota(distances, yb, w.tau)
            dcost = coef["l_ota"] * ddist[..., None, None] * plans

        l_eaw = 0.0
        if self.arm.uses_eaw and n_classes >= 2:
            if bank is None:
                raise ConfigError("entropy-aware loss needs a prototype bank")
            if update_bank:
                bank = update_prototypes(bank, g_img, yb)
            l_eaw, dg_txt_eaw = loss_eaw(bank, g_txt, w)
            dg_txt = dg_txt + coef["l_eaw"] * dg_txt_eaw
        elif update_bank and bank is not None:
            bank = update_prototypes(bank, g_img, yb)

        total = loss_total(l_cos, l_ota, l_eaw, w)
        terms = {"l_cos": l_cos, "l_ota": l_ota, "l_eaw": l_eaw, "total": total}
        aux = {"plans": plans, "bank": bank, "solve": solve}
        if not with_grad:
            return terms, None, aux

        dv = np.zeros_like(v)
        dt = pool_backward(dg_txt, txt_pool)
        dvb = pool_backward(dg_img, img_pool)
        if dcost is not None:
            dv_cost, dt_cost = pairwise_costs_backward(dcost, cost_cache)
            if dv_cost is not None:
                dvb = dvb + dv_cost
                dt = dt + dt_cost
        np.add.at(dv, rows, dvb)

        grads = {}
        dimages = net.backward_text(dt, tcaches, grads)
        if net.cross_modal:
            for g, di in zip(groups, dimages):
                if di is not None:
                    dv[g] += di
        net.backward_images(dv, vcaches, grads)
        return terms, grads, aux
