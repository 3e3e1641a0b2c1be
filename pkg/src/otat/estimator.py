"""scikit-learn style estimator wrapping the dual encoder and its training loop."""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from otat.network import Arm, DualEncoder, Objective, pool
from otat.losses import LossWeights, PrototypeBank
from otat.numeric import NumericalError, make_rng, softmax_rows
from otat.optim import AdamW, cosine_lr
from otat.transport import SinkhornConfig, build_cost, ot_distance, ot_match_probs, sinkhorn
from otat.validation import check_labels, check_text, check_tokens

__all__ = ["OTATClassifier", "StateError", "TrainingDiverged", "classify"]


class StateError(NotFittedError):
    """The estimator has no cached text features to classify against."""


class TrainingDiverged(NumericalError):
    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        detail = " ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


def classify(query, enhanced_text, mode="cosine", tau=0.07, cost="cosine", sinkhorn_cfg=None):
    """Class probabilities for final-layer query tokens against cached class texts.

    ``query`` is (L1, D) or a batch (N, L1, D); ``enhanced_text`` is
    (C, L2t, D). Returns ``(predicted, probabilities)``; ties go to the
    lowest class index.
    """
    if enhanced_text is None or len(enhanced_text) == 0:
        raise StateError("no enhanced text features are cached")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 2
    q = q[None] if single else q
    t = np.asarray(enhanced_text, dtype=np.float64)
    if mode == "cosine":
        g_img, _ = pool(q)
        g_txt, _ = pool(t)
        probs = softmax_rows(g_img @ g_txt.T, tau)
    elif mode == "ot":
        costs = build_cost(q[:, None], t[None], cost)
        plans = sinkhorn(costs, cfg=sinkhorn_cfg or SinkhornConfig())
        probs = ot_match_probs(ot_distance(plans, costs), tau)
    else:
        raise ValueError(f"unknown classification mode {mode!r}")
    pred = np.argmax(probs, axis=1)
    if single:
        return int(pred[0]), probs[0]
    return pred, probs


class OTATClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier that tunes adapters on a frozen toy dual encoder.

    ``fit`` takes support visual token sets ``X`` (N, L1, D), their labels
    and one text token set per class (C, L2t, D), ordered like the sorted
    unique labels. Queries are classified against text features enhanced by
    the whole support set.
    """

    def __init__(
        self,
        arm="OTA_OTO_EAW",
        n_blocks=2,
        cmam_start_layer=2,
        adapter_rank=8,
        alpha=1.0,
        gamma=1.0,
        beta=1.0,
        activation="gelu",
        cost="cosine",
        sinkhorn_lambda=10.0,
        sinkhorn_max_iter=100,
        sinkhorn_tol=1e-6,
        tau=0.07,
        xi=1.0,
        nu=0.08,
        zeta=0.1,
        eps2=1e-8,
        mu_init=0.5,
        mu_step=0.02,
        lr=1e-3,
        weight_decay=0.01,
        beta1=0.9,
        beta2=0.999,
        epochs=50,
        batch_size=64,
        random_state=0,
    ):
        self.arm = arm
        self.n_blocks = n_blocks
        self.cmam_start_layer = cmam_start_layer
        self.adapter_rank = adapter_rank
        self.alpha = alpha
        self.gamma = gamma
        self.beta = beta
        self.activation = activation
        self.cost = cost
        self.sinkhorn_lambda = sinkhorn_lambda
        self.sinkhorn_max_iter = sinkhorn_max_iter
        self.sinkhorn_tol = sinkhorn_tol
        self.tau = tau
        self.xi = xi
        self.nu = nu
        self.zeta = zeta
        self.eps2 = eps2
        self.mu_init = mu_init
        self.mu_step = mu_step
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    # -- construction ----------------------------------------------------------

    def _sinkhorn_config(self):
        return SinkhornConfig(lam=self.sinkhorn_lambda, max_iters=self.sinkhorn_max_iter, tol=self.sinkhorn_tol)

    def _objective(self):
        weights = LossWeights(xi=self.xi, nu=self.nu, zeta=self.zeta, tau=self.tau, eps2=self.eps2)
        return Objective(arm=Arm.parse(self.arm), weights=weights, sinkhorn=self._sinkhorn_config(), cost=self.cost)

    def _build_network(self, dim):
        arm = Arm.parse(self.arm)
        return DualEncoder.build(
            dim,
            n_blocks=self.n_blocks,
            cmam_start_layer=self.cmam_start_layer if arm.cross_modal else None,
            rank=self.adapter_rank,
            alpha=self.alpha,
            gamma=self.gamma,
            beta=self.beta,
            activation=self.activation,
            seed=self.random_state,
        )

    # -- training --------------------------------------------------------------

    def fit(self, X, y, text, eval_set=None):
        """Train the side paths; ``eval_set=(X_query, y_query)`` adds per-epoch metrics."""
        X = check_tokens(X, "X")
        self.classes_, y_idx = check_labels(y, X.shape[0])
        text = check_text(text, len(self.classes_), X.shape[-1])
        self.n_features_in_ = X.shape[-1]
        objective = self._objective()
        net = self._build_network(X.shape[-1])
        params = net.trainable()
        self.initial_params_ = {k: v.copy() for k, v in params.items()}
        optimizer = AdamW(params, weight_decay=self.weight_decay, betas=(self.beta1, self.beta2))
        bank = PrototypeBank.zeros(len(self.classes_), X.shape[-1], mu_init=self.mu_init, mu_step=self.mu_step)

        n = X.shape[0]
        batch = max(1, min(self.batch_size, n))
        steps_per_epoch = math.ceil(n / batch)
        order_rng = make_rng(self.random_state, "batches")
        eval_y = None
        if eval_set is not None:
            eval_x = check_tokens(eval_set[0], "eval X")
            eval_y = np.searchsorted(self.classes_, np.asarray(eval_set[1]))

        self.network_ = net
        self.support_x_ = X
        self.support_y_ = y_idx
        self.text_ = text
        self.step_log_ = []
        self.history_ = []
        step = 0
        for epoch in range(self.epochs):
            lr = cosine_lr(epoch, self.epochs, self.lr)
            order = np.arange(n) if batch >= n else order_rng.permutation(n)
            sums = {"l_cos": 0.0, "l_ota": 0.0, "l_eaw": 0.0, "total": 0.0}
            for s in range(steps_per_epoch):
                rows = order[s * batch:(s + 1) * batch]
                terms, grads, aux = objective.evaluate(
                    net, X, y_idx, text, bank=bank, update_bank=True, loss_rows=None if batch >= n else rows
                )
                if not all(np.isfinite(v) for v in terms.values()):
                    raise TrainingDiverged(step, terms)
                bank = aux["bank"]
                optimizer.step(grads, lr)
                step += 1
                self.step_log_.append({"step": step, **terms, "mu": bank.mu})
                for k in sums:
                    sums[k] += terms[k] / steps_per_epoch
            record = {"epoch": epoch + 1, "lr": lr, **sums, "mu": bank.mu}
            if eval_y is not None:
                self._cache_text()
                record["accuracy"] = float(np.mean(self._predict_idx(eval_x) == eval_y))
                record["mnn"] = self.alignment(eval_x, eval_set[1])
            self.history_.append(record)
        self.bank_ = bank
        self._cache_text()
        return self

    def _cache_text(self):
        net = self.network_
        images = None
        if net.cross_modal:
            v, _ = net.encode_images(self.support_x_)
            images = [v[self.support_y_ == c] for c in range(len(self.classes_))]
        self.enhanced_text_, _ = net.encode_text(self.text_, images)

    # -- inference -------------------------------------------------------------

    def _encoded(self, X):
        check_is_fitted(self, "enhanced_text_")
        X = check_tokens(X, "X", width=self.n_features_in_)
        return self.network_.encode_images(X)[0]

    def transform(self, X):
        """Unit-norm global image embeddings (N, D)."""
        return pool(self._encoded(X))[0]

    def text_embeddings(self):
        check_is_fitted(self, "enhanced_text_")
        return pool(self.enhanced_text_)[0]

    def predict_proba(self, X, mode="cosine"):
        _, probs = classify(self._encoded(X), self.enhanced_text_, mode=mode, tau=self.tau, cost=self.cost,
                            sinkhorn_cfg=self._sinkhorn_config())
        return probs

    def _predict_idx(self, X, mode="cosine"):
        return np.argmax(self.predict_proba(X, mode=mode), axis=1)

    def predict(self, X, mode="cosine"):
        check_is_fitted(self, "enhanced_text_")
        return self.classes_[self._predict_idx(X, mode=mode)]

    def ot_details(self, X):
        """Costs, plans and OT distances of every (query, class) pair."""
        v = self._encoded(X)
        costs = build_cost(v[:, None], self.enhanced_text_[None], self.cost)
        plans = sinkhorn(costs, cfg=self._sinkhorn_config())
        return costs, plans, ot_distance(plans, costs)

    def alignment(self, X, y):
        """Mutual nearest-neighbour rate between class-mean images and class texts."""
        from otat.episodes import mnn_alignment

        g = self.transform(X)
        y_idx = np.searchsorted(self.classes_, np.asarray(y))
        present = [c for c in range(len(self.classes_)) if np.any(y_idx == c)]
        image_means = np.array([g[y_idx == c].mean(axis=0) for c in present])
        return mnn_alignment(image_means, self.text_embeddings()[present])
