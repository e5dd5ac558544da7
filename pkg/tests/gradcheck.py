"""Finite-difference helpers for the learned-model gradient checks."""
import numpy as np

from partial_options.option_models import LearnedModel, masked_loss
from partial_options.options import OptionTransition


def flat_gradient(model, grads):
    """Analytic gradient laid out like ``model.parameters()``.

    A row's background logit is shared by its unslotted end states, so its
    derivative is the per-entry gradient times their count.
    """
    g_slot, g_bg, g_L, g_r = grads
    S, O = model.n_states, model.n_options
    bg, L, r = np.zeros(S * O), np.zeros(S * O), np.zeros(S * O)
    for pair, g in g_bg.items():
        bg[pair] = g * (S - len(model.slots.get(pair, ([], []))[0]))
    for pair, g in g_L.items():
        L[pair] = g
    for pair, g in g_r.items():
        r[pair] = g
    slots = []
    for pair in sorted(model.slots):
        ends = model.slots[pair][0]
        row = g_slot.get(pair, {})
        assert set(row) <= set(ends), "finite-difference check needs every end state slotted"
        slots.append([row.get(e, 0.0) for e in ends])
    return np.concatenate([bg, L, r] + [np.array(x) for x in slots])


def numeric_gradient(model, batch, mask, h=1e-6):
    theta = model.parameters()
    out = np.zeros_like(theta)
    for i in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        model.set_parameters(up)
        f_up = masked_loss(model, batch, mask)
        model.set_parameters(down)
        f_down = masked_loss(model, batch, mask)
        out[i] = (f_up - f_down) / (2 * h)
    model.set_parameters(theta)
    return out


def random_learned(rng, S=4, O=2, full=True):
    model = LearnedModel(S, O, 0.9)
    model.background = rng.normal(size=S * O)
    model.L_hat = rng.normal(size=S * O) + 2
    model.r_hat = rng.normal(size=S * O)
    for pair in range(S * O):
        ends = list(range(S)) if full else sorted(rng.choice(S, size=2, replace=False).tolist())
        model.slots[pair] = (ends, rng.normal(size=len(ends)).tolist())
    return model


def random_batch(model, rng, n=12):
    """Transitions whose end states are all slotted, so no new slots appear."""
    out = []
    for _ in range(n):
        s, o = int(rng.integers(model.n_states)), int(rng.integers(model.n_options))
        ends = model.slots[s * model.n_options + o][0]
        out.append(OptionTransition(s, o, int(rng.integers(1, 5)), int(rng.choice(ends)), float(rng.normal()),
                                    0.0, bool(rng.random() < 0.2)))
    return out
