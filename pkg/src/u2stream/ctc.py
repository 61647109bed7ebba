"""CTC machinery: forward-backward loss with analytic gradient, prefix
beam search over streaming posteriors, and the cross-entropy and hybrid
losses used alongside it.

Blank is index 0 throughout. All probability bookkeeping stays in the
log domain; sums of probabilities go through logaddexp so nothing
underflows on long streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import log_softmax

BLANK = 0
NEG_INF = float("-inf")


def _validate_target(target, vocab: int) -> list[int]:
    tgt = [int(t) for t in target]
    for t in tgt:
        if t == BLANK:
            raise ValueError("ctc target contains blank")
        if not (0 < t < vocab):
            raise ValueError(f"ctc target id {t} out of range")
    return tgt


def _min_frames(tgt: list[int]) -> int:
    repeats = sum(1 for a, b in zip(tgt, tgt[1:]) if a == b)
    return len(tgt) + repeats


def _forward_backward(logits, target):
    """Shared forward-backward pass: returns (loss, log alpha, log beta,
    log posteriors, extended target)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("ctc: logits must be (frames, vocab)")
    T, V = logits.shape
    tgt = _validate_target(target, V)
    if T < _min_frames(tgt):
        raise ValueError(
            f"ctc: target of length {len(tgt)} not alignable within {T} frames"
        )
    lp = log_softmax(logits, axis=-1)
    ext = [BLANK]
    for t in tgt:
        ext += [t, BLANK]
    S = len(ext)
    ext_arr = np.array(ext)

    # -inf + -inf combinations are legitimate here; keep numpy quiet
    with np.errstate(invalid="ignore"):
        alpha = np.full((T, S), NEG_INF)
        alpha[0, 0] = lp[0, BLANK]
        if S > 1:
            alpha[0, 1] = lp[0, ext[1]]
        for t in range(1, T):
            prev = alpha[t - 1]
            stay = prev
            from_prev = np.concatenate([[NEG_INF], prev[:-1]])
            from_skip = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])
            can_skip = np.zeros(S, dtype=bool)
            can_skip[2:] = (ext_arr[2:] != BLANK) & (ext_arr[2:] != ext_arr[:-2])
            merged = np.logaddexp(stay, from_prev)
            merged = np.where(can_skip, np.logaddexp(merged, from_skip), merged)
            alpha[t] = merged + lp[t, ext_arr]

        total = np.logaddexp(
            alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else NEG_INF
        )
        loss = -total

        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, ext_arr]
            stay = nxt
            from_next = np.concatenate([nxt[1:], [NEG_INF]])
            from_skip = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])
            can_skip = np.zeros(S, dtype=bool)
            can_skip[: S - 2] = (ext_arr[2:] != BLANK) & (ext_arr[2:] != ext_arr[:-2])
            merged = np.logaddexp(stay, from_next)
            merged = np.where(can_skip, np.logaddexp(merged, from_skip), merged)
            beta[t] = merged

    return loss, alpha, beta, lp, ext_arr


def ctc_loss(logits, target) -> float:
    """Negative log total alignment probability of ``target`` given frame
    logits, by the standard forward recursion over the blank-interleaved
    target."""
    loss, *_ = _forward_backward(logits, target)
    return float(loss)


def ctc_grad(logits, target) -> np.ndarray:
    """Gradient of ctc_loss with respect to the unnormalized logits."""
    _, grad = ctc_loss_grad(logits, target)
    return grad


def ctc_loss_grad(logits, target) -> tuple[float, np.ndarray]:
    """Loss and gradient in one forward-backward pass."""
    loss, alpha, beta, lp, ext_arr = _forward_backward(logits, target)
    T, V = lp.shape
    # occupancy[t, v] = P(state with label v at frame t | target) summed over
    # matching extended-target positions
    occ_log = alpha + beta + loss  # alpha*beta / P(target) in log domain
    occupancy = np.zeros((T, V))
    occ = np.exp(occ_log)
    for s, v in enumerate(ext_arr):
        occupancy[:, v] += occ[:, s]
    grad = np.exp(lp) - occupancy
    return float(loss), grad


def attention_ce_loss(decoder_logits, target_ids) -> tuple[float, np.ndarray]:
    """Mean token-level negative log-likelihood and its logits gradient.

    Row t of the logits predicts target t; the caller passes content and
    eos rows only (prompt rows excluded).
    """
    logits = np.asarray(decoder_logits, dtype=np.float64)
    tgt = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(tgt):
        raise ValueError(
            f"attention_ce_loss: {logits.shape[0]} logit rows for {len(tgt)} targets"
        )
    n = len(tgt)
    lsm = log_softmax(logits, axis=-1)
    loss = -float(lsm[np.arange(n), tgt].mean())
    grad = np.exp(lsm)
    grad[np.arange(n), tgt] -= 1.0
    grad /= n
    return loss, grad


def hybrid_loss(l_ctc: float, l_att: float, alpha: float) -> float:
    """alpha * l_ctc + (1 - alpha) * l_att."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"hybrid_loss: alpha {alpha} outside [0, 1]")
    return alpha * l_ctc + (1.0 - alpha) * l_att


@dataclass
class Hypothesis:
    """A blank-free CTC prefix with its combined log mass."""

    ids: tuple[int, ...]
    ctc_score: float
    text: str = ""


@dataclass
class BeamState:
    """Prefix beam: blank-ending and non-blank-ending log mass per prefix."""

    prefixes: dict[tuple[int, ...], tuple[float, float]] = field(
        default_factory=lambda: {(): (0.0, NEG_INF)}
    )
    frames_processed: int = 0
    trailing_blank_frames: int = 0
    vocab_size: int | None = None


def beam_start() -> BeamState:
    return BeamState()


def prefix_beam_step(state: BeamState, frame, beam: int) -> BeamState:
    """Advance the prefix beam by one posterior frame.

    Standard update: blank extends the blank-ending mass of every prefix,
    a repeated label splits between collapse (from non-blank mass) and a
    genuine new label (from blank mass), and other labels extend with the
    prefix's total mass. Prefixes are then pruned to the ``beam`` largest
    by combined mass. Exact when beam is at least the number of reachable
    prefixes.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    lp = np.asarray(frame, dtype=np.float64).ravel()
    V = lp.shape[0]
    if V < 2:
        raise ValueError("posterior must cover blank plus at least one label")
    if state.vocab_size is not None and state.vocab_size != V:
        raise ValueError(
            f"posterior length mismatch: got {V}, expected {state.vocab_size}"
        )

    prefixes = list(state.prefixes.keys())
    B = len(prefixes)
    pb = np.array([state.prefixes[p][0] for p in prefixes])
    pnb = np.array([state.prefixes[p][1] for p in prefixes])

    with np.errstate(invalid="ignore"):  # -inf plus -inf is expected here
        ptot = np.logaddexp(pb, pnb)

        # Continuations keep each existing prefix alive: blank after
        # anything, or a repeat of the last label collapsing into it.
        cont_pb = ptot + lp[BLANK]
        cont_pnb = np.full(B, NEG_INF)
        last = np.full(B, -1, dtype=np.int64)
        for b, pref in enumerate(prefixes):
            if pref:
                last[b] = pref[-1]
                cont_pnb[b] = pnb[b] + lp[pref[-1]]

        # Extensions create prefix + c. A repeated label may only extend
        # from the blank-ending mass (the collapse went to the continuation).
        ext = ptot[:, None] + lp[None, :]
        for b in range(B):
            if last[b] >= 0:
                ext[b, last[b]] = pb[b] + lp[last[b]]
        ext[:, BLANK] = NEG_INF

        # An extension may land on a prefix already in the beam; fold that
        # mass into the prefix's continuation so each candidate is unique.
        index = {pref: b for b, pref in enumerate(prefixes)}
        for b, pref in enumerate(prefixes):
            if pref:
                parent = index.get(pref[:-1])
                if parent is not None:
                    cont_pnb[b] = np.logaddexp(cont_pnb[b], ext[parent, pref[-1]])
                    ext[parent, pref[-1]] = NEG_INF

        cont_tot = np.logaddexp(cont_pb, cont_pnb)

    flat = np.concatenate([cont_tot, ext.ravel()])
    order = np.argsort(flat)[::-1]
    picked: dict[tuple[int, ...], tuple[float, float]] = {}
    for idx in order[:beam]:  # candidates are unique prefixes after folding
        score = flat[idx]
        if score == NEG_INF:
            break
        if idx < B:
            picked[prefixes[idx]] = (float(cont_pb[idx]), float(cont_pnb[idx]))
        else:
            b, c = divmod(idx - B, V)
            picked[prefixes[b] + (int(c),)] = (NEG_INF, float(ext[b, c]))
    if not picked:  # all mass pruned away; keep the best continuation anyway
        b = int(np.argmax(cont_tot))
        picked[prefixes[b]] = (float(cont_pb[b]), float(cont_pnb[b]))

    trailing = state.trailing_blank_frames + 1 if int(np.argmax(lp)) == BLANK else 0
    return BeamState(picked, state.frames_processed + 1, trailing, V)


def beam_score(entry: tuple[float, float]) -> float:
    with np.errstate(invalid="ignore"):
        return float(np.logaddexp(entry[0], entry[1]))


def top_k(state: BeamState, k: int) -> list[Hypothesis]:
    """Best k prefixes by combined mass; ties break toward shorter, then
    lexicographically smaller prefixes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not state.prefixes:
        raise ValueError("top_k: empty beam")
    items = sorted(
        state.prefixes.items(),
        key=lambda kv: (-beam_score(kv[1]), len(kv[0]), kv[0]),
    )
    return [Hypothesis(ids=pref, ctc_score=beam_score(pp)) for pref, pp in items[:k]]
