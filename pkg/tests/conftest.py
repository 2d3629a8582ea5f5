import numpy as np

from ncct.losses import topk_mask
from ncct.model import ArchConfig, Batch, HEAD_KEYS, LossTerms, forward, grad_check, init_params
from ncct.selection import select_confident

GRADCHECK_ARCH = ArchConfig(num_classes=7, conv1_channels=4, conv2_channels=8)


def gradcheck_case(seed, batch=4, side=4):
    """A small random net and batch with at least one non-confident sample.

    Head weights are perturbed away from their init so the heads are not
    near-uniform and every loss term has a sizeable gradient.
    """
    rng = np.random.default_rng(seed)
    params = init_params(GRADCHECK_ARCH, seed=seed)
    for k in HEAD_KEYS:
        params[k] = params[k] + rng.normal(0, 0.5, params[k].shape)
    while True:
        weak = rng.random((batch, side, side))
        strong = rng.random((batch, side, side))
        labels = rng.integers(0, GRADCHECK_ARCH.num_classes, batch)
        b = forward(params, weak, strong)
        _, part = select_confident(b.p_w_p, labels)
        if len(part.non_confident):
            return params, Batch(weak, labels, strong), part, topk_mask(b.p_w_n, 4)


TERM_SETS = {
    "L_s": LossTerms(supervised=True, consistency=False),
    "L_c": LossTerms(supervised=False, consistency=True),
    "L_s+L_c": LossTerms(supervised=True, consistency=True),
}


def kink_free_reports(n_nets, start_seed=0, max_draws=400):
    """grad_check reports for the first ``n_nets`` draws whose finite-difference
    probes stay on one side of every ReLU and max-pool kink for all three loss
    variants. Returns (reports, draws_used)."""
    out = []
    seed = start_seed
    while len(out) < n_nets:
        if seed - start_seed >= max_draws:
            raise RuntimeError(f"only {len(out)} kink-free nets in {max_draws} draws")
        params, batch, part, mask = gradcheck_case(seed)
        seed += 1
        reports = {}
        for name, terms in TERM_SETS.items():
            reports[name] = grad_check(params, batch, part, mask, terms)
            if reports[name].kink_crossings:
                break
        else:
            out.append(reports)
    return out, seed - start_seed


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(criterion, ok, detail):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[criterion])
