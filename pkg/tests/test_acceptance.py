"""Acceptance criteria 1-10, one test each, plus a few supplementary checks.

Every test appends a one-line PASS/FAIL verdict to ``conftest.ACCEPTANCE_LINES``;
the lines are echoed in the terminal summary. The training-backed criteria
share one pipeline run per output directory; criterion 10 reruns it from
scratch in a second directory and compares artifact hashes.

Expect roughly 30 minutes on one CPU core.
"""

import csv
import hashlib
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from rfdrl import autodiff as ad
from rfdrl import generate as G
from rfdrl import losses as L
from rfdrl import metrics as MX
from rfdrl.autodiff import Tensor
from rfdrl.compare import classify_compare, write_compare
from rfdrl.model import DisentangleModel, ModelConfig, NoiseSchedule, diffuse_forward, save_checkpoint
from rfdrl.synthrf import SynthConfig, synth_dataset, write_rfds
from rfdrl.trainer import TrainConfig, classifier_probs, compute_losses, export_representations, \
    predict_factors, train

pytestmark = pytest.mark.slow

ACCEPT_SYNTH = SynthConfig(length=64, snr_grid=(5.0, 15.0, 25.0), mod_families=("ASK", "PSK", "QAM"),
                           k_tx=3, signals_per_cell=100, seed=0, impairment_scale=2.0)
SEED = 0
APA_FLOORS = (0.95, 0.90, 0.70)


def record(label, ok: bool, detail: str) -> None:
    line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def dcimig_of(r: MX.ReprDataset) -> float:
    return MX.dcimig(MX.mi_matrix(r.codes, r.factors), MX.factor_entropies(r.factors))


# ---------------------------------------------------------------- shared pipeline

class Pipeline:
    """Lazily runs the training-backed steps once and writes every artifact under ``out``."""

    def __init__(self, out: Path):
        self.out = out
        self._cache = {}

    def _once(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def dataset(self):
        def make():
            ds = synth_dataset(ACCEPT_SYNTH)
            write_rfds(self.out / "data.rfds", ds)
            return ds
        return self._once("dataset", make)

    def _train(self, name, **flags):
        cfg = TrainConfig(seed=SEED, checkpoint=str(self.out / f"{name}.rfck"),
                          trace=str(self.out / f"{name}_trace.csv"), **flags)
        t0 = time.perf_counter()
        res = train(cfg, self.dataset)
        seconds = time.perf_counter() - t0
        r = export_representations(res.model, self.dataset)
        MX.write_repr(self.out / f"{name}_repr.csv", r)
        report = MX.evaluate(r, seed=SEED)
        MX.write_report(self.out / f"{name}_report.csv", report)
        return res, r, report, seconds

    @property
    def full(self):
        return self._once("full", lambda: self._train("full"))

    @property
    def no_lc(self):
        return self._once("no_lc", lambda: self._train("no_lc", use_lc=False))

    @property
    def no_rc(self):
        return self._once("no_rc", lambda: self._train("no_rc", use_rc=False))

    @property
    def compare(self):
        def make():
            rows = classify_compare(self.dataset, TrainConfig(seed=SEED))
            write_compare(self.out / "compare.csv", rows)
            return rows
        return self._once("compare", make)

    @property
    def probe(self):
        def make():
            clf = G.train_reference_classifier(self.dataset, 2, seed=SEED)
            save_checkpoint(self.out / "ref_classifier.rfck",
                            {k: t.data for k, t in clf.named_parameters().items()})
            res = G.swap_probe(self.full[0].model, self.dataset, 0, 1, factor=2, classifier=clf, seed=SEED)
            with open(self.out / "probe.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["base_class", "code_class", "p0", "p1", "p2"])
                w.writerow([res.a, res.b, *map(repr, res.probs_a_to_b.tolist())])
                w.writerow([res.b, res.a, *map(repr, res.probs_b_to_a.tolist())])
            return res, clf
        return self._once("probe", make)

    @property
    def snr_swap(self):
        def make():
            model = self.full[0].model
            ds = self.dataset
            lab = ds.labels
            top, bottom = ds.cards[0] - 1, 0
            t_start = G.default_swap_start(model)
            swap, ident = [], []
            for i in np.flatnonzero(lab[:, 0] == top)[::9][:60]:
                j = np.flatnonzero((lab[:, 0] == bottom) & (lab[:, 1] == lab[i, 1]) & (lab[:, 2] == lab[i, 2]))[0]
                swap.append(G.SwapPlan(int(j), int(i), (G.SOURCE, G.TARGET, G.TARGET), t_start))
                ident.append(G.SwapPlan(int(j), int(i), (G.TARGET,) * 3, t_start))
            x = ds.as_real()
            g_swap = G.swap_factors(model, x, swap, seed=SEED)
            g_id = G.swap_factors(model, x, ident, seed=SEED, allow_identity=True)
            G.write_generated(self.out, g_swap, G.plan_labels(lab, swap), ds.cards, swap, name="snr_swap")
            G.write_generated(self.out, g_id, G.plan_labels(lab, ident), ds.cards, ident, name="snr_identity")
            return len(swap), G.estimate_noise_power(g_swap), G.estimate_noise_power(g_id)
        return self._once("snr_swap", make)

    def run_all(self):
        for step in ("full", "no_lc", "no_rc", "compare", "probe", "snr_swap"):
            getattr(self, step)

    def hashes(self) -> dict[str, str]:
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(self.out.iterdir()) if p.is_file()}


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    return Pipeline(tmp_path_factory.mktemp("acceptance_a"))


@pytest.fixture(scope="session")
def run_b(tmp_path_factory):
    return Pipeline(tmp_path_factory.mktemp("acceptance_b"))


# ---------------------------------------------------------------- 1. gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    cfg = ModelConfig(length=16, cards=(3, 3, 3), d_c=4, d_f=8, steps=10, beta_start=1e-3, beta_end=0.5)
    model = DisentangleModel(cfg, seed=1)
    rng = np.random.default_rng(0)
    params = model.named_parameters()
    # move away from the zero-initialized output layer and zero biases so every path carries gradient
    for name, t in params.items():
        if name.startswith("g.out"):
            t.data = 0.05 * rng.standard_normal(t.shape)
        elif name.endswith(".b"):
            t.data = 0.1 * rng.standard_normal(t.shape)
    x = 0.7 * rng.standard_normal((3, 2, 16))
    y = rng.integers(0, 3, (3, 3))
    tc = TrainConfig(batch_size=3)
    groups = model.groups()
    worst: dict[str, float] = {g: 0.0 for g in groups}
    for comp in L.COMPONENTS:
        def loss():
            return compute_losses(model, x, y, tc, np.random.default_rng(5))[comp]
        # the classifier heads are deliberately cut out of the cross-entropy-maximizing term
        names = {n: g for g, ns in groups.items() for n in ns if not (comp == "ie" and g == "C")}
        # h=1e-4: at 1e-5 the O(eps*|loss|/h) roundoff alone reaches ~1e-6 on small gradient entries
        errs = ad.grad_check_params(loss, {n: params[n] for n in names}, h=1e-4, entries=6)
        for n, e in errs.items():
            worst[names[n]] = max(worst[names[n]], e)
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and seconds < 60
    detail = ", ".join(f"{g} {v:.1e}" for g, v in worst.items())
    record("criterion 1", ok, f"max rel err per group: {detail}; {seconds:.0f}s (limit 1e-6, 60s, h=1e-4)")


# ---------------------------------------------------------------- 2. diffusion law

def test_criterion_2_diffusion_law():
    s = NoiseSchedule()
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((10_000, 2, 8)) * math.sqrt(0.5)
    var0 = x0.var(axis=0)
    rel = {}
    for t in (1, s.T // 2, s.T):
        xt = diffuse_forward(x0, np.full(len(x0), t), rng.standard_normal(x0.shape), s)
        expect = s.alpha_bar[t] * var0 + 1 - s.alpha_bar[t]
        rel[t] = float(np.max(np.abs(xt.var(axis=0) / expect - 1)))
    ok = max(rel.values()) < 0.05 and s.alpha_bar[s.T] < 0.05
    record("criterion 2", ok, "max rel var err " + ", ".join(f"t={t}: {v:.3f}" for t, v in rel.items())
           + f"; alpha_bar_T={s.alpha_bar[s.T]:.4f} (limit 0.05, 0.05)")


# ---------------------------------------------------------------- 3. loss oracles

def test_criterion_3_loss_oracles():
    checks = {}
    onehot = np.zeros((2, 3, 6))
    onehot[:, 0, :2] = onehot[:, 1, 2:4] = onehot[:, 2, 4:] = 1.0
    checks["se one-hot"] = abs(L.loss_se(Tensor(onehot)).item()) <= 1e-9
    # checked as stated; the loss averages over the N factors, which gives ln 3 / 3 here
    uni = L.loss_se(Tensor(np.full((2, 3, 6), 1 / 3))).item()
    checks["se uniform"] = abs(uni - math.log(3)) <= 1e-9
    orth = np.zeros((4, 2, 6))
    orth[:, 0, :3], orth[:, 1, 3:] = 1.0, 2.0
    checks["fd orthogonal"] = L.loss_fd(Tensor(orth)).item() == 0.0
    z = np.random.default_rng(0).standard_normal((6, 3, 5))
    checks["fd scale"] = abs(L.loss_fd(Tensor(z)).item() - L.loss_fd(Tensor(z * 37.0)).item()) <= 1e-12
    lab = np.array([[0, 1, 2], [2, 0, 1]])
    checks["ce perfect"] = abs(L.loss_ce([Tensor(np.eye(3)[lab[:, n]]) for n in range(3)], lab).item()) <= 1e-9
    cards = (7, 5, 7)
    pairs = [(a, b) for a in range(3) for b in range(3) if a != b]
    top = L.loss_ie({p: Tensor(np.full((2, cards[p[1]]), 1 / cards[p[1]])) for p in pairs}).item()
    bottom = L.loss_ie({p: Tensor(np.eye(cards[p[1]])[[0, 1]]) for p in pairs}).item()
    checks["ie bounds"] = abs(top - L.ie_upper_bound(cards)) <= 1e-9 and abs(bottom) <= 1e-9
    w = L.LossWeights()
    base = {"rc": 2.0, "fd": 3.0, "se": 5.0, "ce": 7.0, "ie": 1.0}
    checks["total sign"] = L.loss_total({**base, "ie": 1.5}, w) < L.loss_total(base, w)
    bad = [k for k, v in checks.items() if not v]
    record("criterion 3", not bad, f"{len(checks) - len(bad)}/{len(checks)} loss oracles hold"
           + (f"; failing: {bad}" if bad else "") + f"; L_SE(uniform)={uni:.6f} vs ln 3={math.log(3):.6f}")


# ---------------------------------------------------------------- 4. metric oracles

def test_criterion_4_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    cards = (3, 3, 3)
    f = np.stack([rng.integers(0, k, 3000) for k in cards], axis=1)
    oracle = MX.ReprDataset(MX.oracle_representation(f, cards, block=4, sigma=0.1, seed=4), f, cards)
    indep = MX.ReprDataset(rng.standard_normal((3000, 12)), f, cards)
    o = dict(z_diff=MX.z_diff(oracle), modularity=MX.modularity_score(MX.mi_matrix(oracle.codes, f)),
             dcimig=dcimig_of(oracle), explicitness=MX.explicitness_score(oracle.codes, f),
             apa=float(MX.apa(oracle.codes, f).mean()))
    i = dict(z_diff=MX.z_diff(indep), apa=float(MX.apa(indep.codes, f).mean()), dcimig=dcimig_of(indep))
    seconds = time.perf_counter() - t0
    floors = dict(z_diff=0.95, modularity=0.95, dcimig=0.8, explicitness=0.95, apa=0.99)
    ok = all(o[k] >= v for k, v in floors.items())
    ok &= abs(i["z_diff"] - 1 / 3) <= 0.1 and abs(i["apa"] - 1 / 3) <= 0.1 and i["dcimig"] <= 0.1
    ok &= seconds < 120
    record("criterion 4", ok,
           "oracle " + ", ".join(f"{k} {v:.3f}" for k, v in o.items())
           + "; independent " + ", ".join(f"{k} {v:.3f}" for k, v in i.items()) + f"; {seconds:.0f}s")


# ---------------------------------------------------------------- 5. training

def test_criterion_5_training(run_a):
    res, r, report, seconds = run_a.full
    first, last = res.trace[0].l_total, res.trace[-1].l_total
    acc = report.apa
    ok = last < 0.5 * first and all(a >= t for a, t in zip(acc, APA_FLOORS)) and seconds <= 1800
    record("criterion 5", ok,
           f"loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f}, limit 0.5); APA snr/mod/tx "
           + "/".join(f"{a:.3f}" for a in acc) + " (floors 0.95/0.90/0.70)"
           + f"; {len(res.trace)} epochs in {seconds / 60:.1f} min")


# ---------------------------------------------------------------- 6. ablation ordering

def test_criterion_6_ablation_ordering(run_a):
    full = run_a.full[2].dcimig
    no_lc = run_a.no_lc[2].dcimig
    no_rc = run_a.no_rc[2].dcimig
    ok = full - no_lc > 0.05 and full - no_rc > 0.05
    record("criterion 6", ok,
           f"dcimig all {full:.4f}, no L_C {no_lc:.4f} (margin {full - no_lc:+.4f}), "
           f"no L_RC {no_rc:.4f} (margin {full - no_rc:+.4f}); both margins must exceed 0.05")


# ---------------------------------------------------------------- 7. classification ordering

def test_criterion_7_classification_ordering(run_a):
    rows = {r.variant: r for r in run_a.compare}
    ok = rows["full"].average >= rows["lc_only"].average
    record("criterion 7", ok, "; ".join(
        f"{v} " + "/".join(f"{a:.3f}" for a in r.accuracy) + f" avg {r.average:.4f}" for v, r in rows.items()))


# ---------------------------------------------------------------- 8. swap probe

def test_criterion_8_swap_probe(run_a):
    res, _ = run_a.probe
    ok = res.passes()
    record("criterion 8", ok,
           f"tx class {res.a} bases with class {res.b} codes: p{res.b} {res.probs_a_to_b[res.b]:.3f} vs "
           f"p{res.a} {res.probs_a_to_b[res.a]:.3f}; class {res.b} bases with class {res.a} codes: "
           f"p{res.a} {res.probs_b_to_a[res.a]:.3f} vs p{res.b} {res.probs_b_to_a[res.b]:.3f}; "
           f"reference classifier clean accuracy {res.clean_accuracy:.3f}")


# ---------------------------------------------------------------- 9. SNR swap

def test_criterion_9_snr_swap(run_a):
    n, swapped, identity = run_a.snr_swap
    ok = n >= 50 and swapped.mean() > identity.mean()
    record("criterion 9", ok, f"{n} plans, mean estimated noise power swapped {swapped.mean():.4f} "
           f"vs identity {identity.mean():.4f}")


# ---------------------------------------------------------------- 10. determinism

def test_criterion_10_determinism(run_a, run_b):
    run_a.run_all()
    run_b.run_all()
    ha, hb = run_a.hashes(), run_b.hashes()
    same = sorted(k for k in ha if hb.get(k) == ha[k])
    differ = sorted(set(ha) ^ set(hb) | {k for k in ha if k in hb and ha[k] != hb[k]})
    ok = not differ and len(same) >= 10
    record("criterion 10", ok, f"{len(same)} artifacts bit-identical across two runs"
           + (f"; differing: {differ}" if differ else ""))


# ---------------------------------------------------------------- supplementary checks

def test_supplementary_rff_resample_keeps_modulation(run_a):
    model = run_a.full[0].model
    ds = run_a.dataset
    ids = np.random.default_rng(SEED).choice(len(ds), 100, replace=False)
    x = ds.as_real()[ids]
    pool = G.build_code_pool(model, ds)
    before = predict_factors(model, x)[1].argmax(axis=1)
    targets = (ds.labels[ids, 2] + 1) % ds.cards[2]
    out = np.concatenate([G.resample_factor(model, x[i:i + 1], 2, int(k), pool, seed=SEED)
                          for i, k in enumerate(targets)])
    after = predict_factors(model, out)[1].argmax(axis=1)
    kept = float(np.mean(before == after))
    record("supplementary rff-resample", kept >= 0.8,
           f"modulation head unchanged on {kept:.2f} of 100 transmitter resamples (floor 0.80)")


def test_supplementary_psk_resample_flattens_envelope(run_a):
    model = run_a.full[0].model
    ds = run_a.dataset
    psk, qam = ds.meta["mod_families"].index("PSK"), ds.meta["mod_families"].index("QAM")
    ids = np.flatnonzero((ds.labels[:, 1] == qam) & (ds.labels[:, 0] == ds.cards[0] - 1))[:60]
    x = ds.as_real()[ids]
    pool = G.build_code_pool(model, ds)
    out = G.resample_factor(model, x, 1, psk, pool, seed=SEED)
    cv_src, cv_out = G.amplitude_cv(x).mean(), G.amplitude_cv(out).mean()
    record("supplementary psk-resample", cv_out < cv_src,
           f"amplitude CV of QAM sources {cv_src:.3f} -> {cv_out:.3f} after resampling to PSK")


def test_supplementary_reference_classifier(run_a):
    res, clf = run_a.probe
    record("supplementary reference-classifier", res.clean_accuracy >= 0.95,
           f"clean accuracy on unswapped classes {res.a}/{res.b}: {res.clean_accuracy:.3f} (floor 0.95)")


def test_supplementary_twenty_epoch_progress(run_a):
    trace = run_a.full[0].trace
    ratio = trace[19].l_total / trace[0].l_total
    record("supplementary 20-epoch progress", ratio < 0.5,
           f"epoch 20 / epoch 1 total loss = {ratio:.3f} (limit 0.5)")
