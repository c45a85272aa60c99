import numpy as np
import pytest

from feedbackseg import network

# Every feedback inference anywhere in the suite is checked for the
# suppressed-mass property; the acceptance module reads these counters.
SUPPRESSED_MASS_AUDIT = {"inferences": 0, "units": 0, "violations": []}
_original_gate_context = network.gate_context


def _audited_gate_context(net, cache, target_class, gamma=None):
    ctx = _original_gate_context(net, cache, target_class, gamma)
    g0 = net.config.gamma if gamma is None else gamma
    SUPPRESSED_MASS_AUDIT["inferences"] += 1
    for u, (mass, th, a) in enumerate(zip(ctx.suppressed_mass(), ctx.gates, ctx.activations)):
        SUPPRESSED_MASS_AUDIT["units"] += 1
        # With gamma > 0 closed neurons may carry gradient in (0, gamma].
        bound = 0.0 if g0 == 0 else g0 * float(np.sum(np.where(th == 0, a, 0), dtype=np.float64))
        if not mass <= bound:
            SUPPRESSED_MASS_AUDIT["violations"].append((u, mass, bound))
    return ctx


@pytest.fixture(autouse=True)
def _audit_suppressed_mass(monkeypatch):
    monkeypatch.setattr(network, "gate_context", _audited_gate_context)
    before = len(SUPPRESSED_MASS_AUDIT["violations"])
    yield
    assert len(SUPPRESSED_MASS_AUDIT["violations"]) == before, "suppressed mass > 0"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
