"""Batched pair models: MemGCN and the Raw Edges / MLP baselines.

Every model embeds acquisitions into ``(n, d)`` ROI feature maps, then shares
the matching layer, the classification head and the loss. Parameters live in
one ``dict`` of named float64 arrays so the optimizer and the checkpoint
writer never need to know which model they belong to.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import matching
from .chebnet import ChebFilterBank, graph_conv_backward, graph_conv_forward
from .errors import ValidationError
from .memory import AttentionTrace, hop_keys
from .numerics import DEFAULT_H, grad_check, make_rng, softmax

HEAD_KEYS = ("W1", "b1", "W2", "b2")


class PairModel:
    kind = None

    def __init__(self, matching_kind, n, d, h_head, rng):
        if matching_kind not in (matching.INNER, matching.BILINEAR):
            raise ValidationError(f"unknown matching kind {matching_kind!r}")
        self.matching = matching_kind
        self.n, self.d, self.h_head = n, d, h_head
        self.params = {}
        self.frozen = set()
        match_dim = n if matching_kind == matching.INNER else n * n
        head = matching.HeadParams.init(match_dim, h_head, rng, d=d if matching_kind == matching.BILINEAR else None)
        self._head_init = head

    def _add_head(self):
        h = self._head_init
        self.params.update(W1=h.W1, b1=h.b1, W2=h.W2, b2=h.b2)
        if h.M is not None:
            self.params["M"] = h.M
        del self._head_init

    def trainable(self):
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    # subclasses implement embed(X, S, pad) -> (Y, cache) and embed_backward(cache, dY) -> grads

    def embed_all(self, X, S, pad, chunk=64):
        out = [self.embed(X[i : i + chunk], S[i : i + chunk], pad[i : i + chunk])[0] for i in range(0, len(X), chunk)]
        return np.concatenate(out) if out else np.empty((0, self.n, self.d))

    def pair_probs(self, Ya, Yb):
        sims, mcache = matching.match_forward(self.matching, Ya, Yb, self.params.get("M"))
        p, hcache = matching.head_forward(
            sims.reshape(len(Ya), -1), self.params["W1"], self.params["b1"], self.params["W2"], self.params["b2"]
        )
        return p, sims, (mcache, hcache)

    def predict_pairs(self, Y, ia, ib, chunk=4096):
        out = [self.pair_probs(Y[ia[i : i + chunk]], Y[ib[i : i + chunk]])[0] for i in range(0, len(ia), chunk)]
        return np.concatenate(out) if out else np.empty((0, 2))

    def loss_and_grad(self, X, S, pad, ia, ib, labels, gamma, threads=1):
        """Mean cross-entropy plus L2 over a batch of pairs given by cohort indices.

        Returns (loss, data_loss, grads). Frozen parameters get no gradient.
        """
        labels = matching.check_labels(labels)
        uniq, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
        la, lb = inv[: len(ia)], inv[len(ia) :]
        chunks = _split(len(uniq), threads)
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda c: self.embed(X[uniq[c]], S[uniq[c]], pad[uniq[c]]), chunks))
        else:
            parts = [self.embed(X[uniq[c]], S[uniq[c]], pad[uniq[c]]) for c in chunks]
        Y = np.concatenate([p[0] for p in parts])

        p, sims, (mcache, hcache) = self.pair_probs(Y[la], Y[lb])
        ce = matching.cross_entropy(p[:, 1], labels)
        data_loss = float(np.mean(ce))
        onehot = np.stack([1.0 - labels, labels], axis=1)
        grad_logits = (p - onehot) / len(labels)
        grads, df = matching.head_backward(self.params["W1"], self.params["W2"], hcache, grad_logits)
        dYa, dYb, dM = matching.match_backward(self.matching, mcache, df.reshape(sims.shape))
        if dM is not None:
            grads["M"] = dM
        dY = np.zeros_like(Y)
        np.add.at(dY, la, dYa)
        np.add.at(dY, lb, dYb)

        def back(args):
            (_, cache), c = args
            return self.embed_backward(cache, dY[c])

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts_g = list(pool.map(back, zip(parts, chunks)))
        else:
            parts_g = [back(a) for a in zip(parts, chunks)]
        for g in parts_g:  # fixed chunk order keeps the sum reproducible
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v

        trainable = self.trainable()
        reg = matching.l2_penalty(trainable.values())
        out = {}
        for k, v in trainable.items():
            out[k] = grads.get(k, np.zeros_like(v)) + 2.0 * gamma * v
        return data_loss + gamma * reg, data_loss, out

    def reset_memory(self):
        pass


def _split(count, parts):
    return [b for b in np.array_split(np.arange(count), max(1, min(parts, count))) if len(b)]


class MemGCN(PairModel):
    """Multi-hop memory-augmented ChebNet followed by pair matching."""

    kind = "memgcn"

    def __init__(self, delta_tilde, D, r=30, f_out=32, d=32, hops=3, matching_kind="inner", h_head=64,
                 activation="relu", mask_padding=False, tie_h=False, use_memory=True, rng=0):
        if d != f_out:
            raise ValidationError(f"memory dimension d={d} must equal graph feature size f_out={f_out}")
        if hops < 1:
            raise ValidationError(f"hops must be >= 1, got {hops}")
        if activation not in ("relu", "none"):
            raise ValidationError(f"unknown activation {activation!r}")
        rng = make_rng(rng)
        self.delta_tilde = np.asarray(delta_tilde, dtype=np.float64)
        n = self.delta_tilde.shape[0]
        super().__init__(matching_kind, n, d, h_head, rng)
        self.D, self.r, self.hops = D, r, hops
        self.activation, self.mask_padding, self.tie_h, self.use_memory = activation, mask_padding, tie_h, use_memory
        self.theta_keys, self.h_keys = hop_keys(hops, tie_h)
        f_in = n
        for tk in self.theta_keys:
            self.params[tk] = ChebFilterBank.init(r, f_in, f_out, rng).theta
            f_in = f_out
        bound = np.sqrt(6.0 / (d + D))
        self.params["A"] = rng.uniform(-bound, bound, size=(d, D))
        self.params["B"] = rng.uniform(-bound, bound, size=(d, D))
        for hk in dict.fromkeys(self.h_keys):
            self.params[hk] = np.eye(d) + 0.01 * rng.standard_normal((d, d))
        self._add_head()
        if not use_memory:
            self.reset_memory()

    def reset_memory(self):
        """Zero and freeze both memory embeddings (the memory-ablated GCN)."""
        self.params["A"] = np.zeros_like(self.params["A"])
        self.params["B"] = np.zeros_like(self.params["B"])
        self.frozen |= {"A", "B"}
        self.use_memory = False

    def embed(self, X, S, pad):
        p = self.params
        z = S @ p["A"].T  # (B, t, d)
        e = S @ p["B"].T
        h = X
        hops = []
        if self.mask_padding:
            # a fully padded sequence keeps uniform attention instead of NaNs
            pad = pad & ~np.all(pad, axis=1, keepdims=True)
        for tk, hk in zip(self.theta_keys, self.h_keys):
            U, basis = graph_conv_forward(p[tk], self.delta_tilde, h, return_basis=True)
            y = np.maximum(U, 0.0) if self.activation == "relu" else U
            logits = y @ np.swapaxes(z, -1, -2)  # (B, n, t)
            if self.mask_padding:
                logits = np.where(pad[:, None, :], -np.inf, logits)
            alpha = softmax(logits, axis=-1)
            c = alpha @ e
            hops.append({"h_in": h, "basis": basis, "U": U, "y": y, "alpha": alpha})
            h = y @ p[hk].T + c
        return h, {"S": S, "z": z, "e": e, "hops": hops}

    def embed_backward(self, cache, dY):
        p = self.params
        S, z, e = cache["S"], cache["z"], cache["e"]
        grads = {}
        dz = np.zeros_like(z)
        de = np.zeros_like(e)
        dh = dY
        for hop, tk, hk in reversed(list(zip(cache["hops"], self.theta_keys, self.h_keys))):
            y, alpha = hop["y"], hop["alpha"]
            H = p[hk]
            dH = np.einsum("bia,bic->ac", dh, y)
            grads[hk] = grads[hk] + dH if hk in grads else dH
            dy = dh @ H
            dalpha = dh @ np.swapaxes(e, -1, -2)  # (B, n, t)
            de += np.swapaxes(alpha, -1, -2) @ dh
            dlogits = alpha * (dalpha - np.sum(dalpha * alpha, axis=-1, keepdims=True))
            dy += dlogits @ z
            dz += np.swapaxes(dlogits, -1, -2) @ y
            dU = dy * (hop["U"] > 0) if self.activation == "relu" else dy
            first = tk == self.theta_keys[0]
            gtheta, dh = graph_conv_backward(
                p[tk], self.delta_tilde, hop["h_in"], dU, basis=hop["basis"], need_input_grad=not first
            )
            grads[tk] = gtheta
        St = S.reshape(-1, S.shape[-1])
        grads["A"] = dz.reshape(-1, dz.shape[-1]).T @ St
        grads["B"] = de.reshape(-1, de.shape[-1]).T @ St
        return grads

    def attention_trace(self, x, S, pad):
        _, cache = self.embed(x[None], S[None], pad[None])
        return AttentionTrace([hop["alpha"][0].T.copy() for hop in cache["hops"]])


class RawEdges(PairModel):
    """Connectivity rows used directly as per-ROI features; only the head trains."""

    kind = "raw_edges"

    def __init__(self, n, matching_kind="inner", h_head=64, rng=0):
        rng = make_rng(rng)
        super().__init__(matching_kind, n, n, h_head, rng)
        self._add_head()

    def embed(self, X, S, pad):
        return np.array(X, dtype=np.float64), None

    def embed_backward(self, cache, dY):
        return {}


class MLPBaseline(PairModel):
    """Three fully connected layers per acquisition, reshaped to (n, d) for matching."""

    kind = "mlp"

    def __init__(self, n, d=32, hidden=(1024, 64), matching_kind="inner", h_head=64, rng=0):
        rng = make_rng(rng)
        super().__init__(matching_kind, n, d, h_head, rng)
        sizes = [n * n, *hidden, n * d]
        self.layer_keys = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            bound = np.sqrt(6.0 / (a + b))
            self.params[f"fc{i}_W"] = rng.uniform(-bound, bound, size=(b, a))
            self.params[f"fc{i}_b"] = np.zeros(b)
            self.layer_keys.append((f"fc{i}_W", f"fc{i}_b"))
        self._add_head()

    def embed(self, X, S, pad):
        a = X.reshape(len(X), -1)
        acts = [a]
        pre = []
        last = len(self.layer_keys) - 1
        for i, (wk, bk) in enumerate(self.layer_keys):
            u = a @ self.params[wk].T + self.params[bk]
            pre.append(u)
            a = u if i == last else np.maximum(u, 0.0)
            acts.append(a)
        return a.reshape(len(X), self.n, self.d), {"acts": acts, "pre": pre}

    def embed_backward(self, cache, dY):
        grads = {}
        da = dY.reshape(len(dY), -1)
        last = len(self.layer_keys) - 1
        for i in range(last, -1, -1):
            wk, bk = self.layer_keys[i]
            du = da if i == last else da * (cache["pre"][i] > 0)
            grads[wk] = du.T @ cache["acts"][i]
            grads[bk] = du.sum(axis=0)
            da = du @ self.params[wk]
        return grads


def param_groups(model):
    """Gradient-check groups: one per filter bank, A, B, each H, M, and the head."""
    groups = {}
    for k in model.trainable():
        groups.setdefault("head" if k in HEAD_KEYS else k, []).append(k)
    return groups


def model_gradcheck(model, X, S, pad, ia, ib, labels, gamma=1e-2, h=DEFAULT_H, corrupt=None):
    """Max relative finite-difference error per parameter group.

    ``corrupt`` names a group whose analytic gradient is deliberately
    perturbed, as a negative control for the harness.
    """
    _, _, grads = model.loss_and_grad(X, S, pad, ia, ib, labels, gamma)
    if corrupt is not None:
        for k in param_groups(model)[corrupt]:
            grads[k] = grads[k] + 1e-2 * (1.0 + np.abs(grads[k]))

    def objective(_):
        return model.loss_and_grad(X, S, pad, ia, ib, labels, gamma)[0]

    report = {}
    for group, keys in param_groups(model).items():
        report[group] = grad_check(objective, [model.params[k] for k in keys], [grads[k] for k in keys], h=h)
    return report
