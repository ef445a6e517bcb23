"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines. The end-to-end criteria retrain real models and take minutes.
"""

import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from sokd import autodiff as ad
from sokd.cli import main as cli_main
from sokd.config import RunConfig, config_from_dict
from sokd.dafa import (
    AugPolicy,
    OpChoice,
    SubPolicy,
    _op_node,
    consistency_loss,
    magnitude_grad,
    mix_subpolicies,
)
from sokd.dam import (
    DistinctiveArea,
    build_dam_head,
    dam_align_loss,
    dam_forward,
    masked_distill_loss,
)
from sokd.data import make_synthetic, split_train_val
from sokd.gradcheck import run_gradient_suite
from sokd.models import (
    TEACHER_DEFAULT,
    Adapter,
    Backbone,
    build_backbone,
    pretrain_teacher,
)
from sokd.oracle import (
    FeatureSnapshot,
    PolicyGrid,
    enumerate_policies,
    gumbel_frequency_test,
    ks_critical_value,
)
from sokd.tensor import Rng, Tensor
from sokd.trainer import (
    init_train_state,
    ks_preservation_report,
    run_full,
    run_search,
)

DATA_SEED = 20250810
TEACHER_SEED = 7


def report(line: str) -> None:
    print(f"\n[acceptance] {line}")


@pytest.fixture(scope="module")
def desk_task():
    """The default synthetic task (4k train / 1k test) with a pretrained,
    frozen teacher; shared by the end-to-end criteria."""
    rng = Rng(DATA_SEED)
    train_ds = make_synthetic(10, 400, 16, 3, rng.child("train"))
    test_ds = make_synthetic(10, 100, 16, 3, rng.child("test"))
    teacher = build_backbone(TEACHER_DEFAULT, Rng(TEACHER_SEED).child("teacher-init"))
    teacher, teacher_top1 = pretrain_teacher(
        teacher, train_ds, epochs=20, lr=0.05,
        rng=Rng(TEACHER_SEED).child("teacher-train"), eval_dataset=test_ds)
    return {"train": train_ds, "test": test_ds, "teacher": teacher,
            "teacher_top1": teacher_top1}


class TestCriterion01GradientCorrectness:
    def test_autodiff_matches_finite_differences(self):
        t0 = time.time()
        rows = run_gradient_suite(n_graphs=20, eps=1e-3, tol=1e-3)
        elapsed = time.time() - t0
        failures = [r for r in rows if not r.passed]
        templates = {r.template for r in rows}
        assert templates >= {"conv-classifier", "elementwise-chain", "softmax-pick",
                             "soft-mixture", "relaxed-bernoulli"}
        assert not failures, failures
        assert elapsed < 60.0
        worst = max(r.rel_err for r in rows)
        report(f"criterion 1 PASS: 20 seeded graphs, {len(rows)} gradient comparisons, "
               f"worst rel err {worst:.2e} (tol 1e-3), {elapsed:.1f}s")


class TestCriterion02GumbelMaxLaw:
    def test_argmax_frequencies(self):
        t0 = time.time()
        for tau in (1.0, 0.2):  # the argmax law does not depend on the temperature
            d = gumbel_frequency_test([1.0, 0.0, -1.0], 100_000,
                                      Rng(42).child(f"gumbel-{tau}"))
            assert d <= 0.02, f"tau={tau}: L1 distance {d}"
        elapsed = time.time() - t0
        assert elapsed < 30.0
        report(f"criterion 2 PASS: Gumbel argmax L1 distance <= 0.02 at "
               f"tau in {{1.0, 0.2}} over 100k draws, {elapsed:.1f}s")


class TestCriterion03RelaxedBernoulliThreshold:
    def test_threshold_frequency(self):
        t0 = time.time()
        beta = 0.7
        for lam in (0.5, 0.1):
            u = Rng(9).child(f"bern-{lam}").uniform(100_000)
            b = 1.0 / (1.0 + np.exp(-((np.log(beta / (1 - beta))
                                       + np.log(u / (1 - u))) / lam)))
            freq = float((b > 0.5).mean())
            assert abs(freq - beta) <= 0.01, f"lam={lam}: frequency {freq}"
        elapsed = time.time() - t0
        assert elapsed < 30.0
        report(f"criterion 3 PASS: P(b > 0.5) within 0.01 of beta=0.7 for "
               f"lambda in {{0.5, 0.1}} over 100k draws, {elapsed:.1f}s")


class TestCriterion04StraightThroughMagnitude:
    def test_registered_backward_bit_exact(self):
        for case in range(10):
            rng = Rng(500 + case)
            dims = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
            upstream = (rng.uniform(dims) * 4 - 2).astype(np.float32)
            feature = rng.normal(dims).astype(np.float32)

            # registered backward of the additive-noise op node
            tape = ad.Tape()
            f_node = tape.constant(Tensor(feature))
            m_node = tape.param(Tensor([0.3]))
            noise = {"eps": rng.normal(dims).astype(np.float32)}
            out = _op_node(tape, "additive_gaussian_noise", f_node, m_node, noise)
            loss = ad.sum_all(ad.mul(out, tape.constant(Tensor(upstream))))
            got = np.float32(ad.backward(loss)[m_node].data[0])

            # hand-summed oracle: exact rational sum, rounded once to float32
            exact = sum((Fraction(float(v)) for v in upstream.ravel()), Fraction(0))
            want = np.float32(float(exact))
            assert got.tobytes() == want.tobytes(), f"case {case}: {got!r} != {want!r}"
            direct = np.float32(magnitude_grad(Tensor(upstream)))
            assert direct.tobytes() == want.tobytes()
        report("criterion 4 PASS: straight-through magnitude backward equals the "
               "hand-summed upstream total bit-exactly on 10 random cases")


class TestCriterion05IdentityPolicyInvariance:
    def test_identity_policy_and_teacher_initialized_student(self, desk_task):
        teacher: Backbone = desk_task["teacher"]
        x = desk_task["train"].images.data[:8]
        f_t, _ = teacher.forward_arrays(x)
        policy = AugPolicy(np.zeros(3),
                           [SubPolicy([OpChoice("identity", 0.5, 0.0)])] * 3)
        out = mix_subpolicies(policy, Tensor(f_t), Rng(11).child("identity"), mode="hard")
        assert out.data.tobytes() == f_t.tobytes()

        twin = Backbone(teacher.spec, dict(teacher.weights))
        f_s, _ = twin.forward_arrays(x)
        adapter = Adapter.init_identity(teacher.spec.feature_shape()[0])
        aligned = adapter.apply_arrays(f_s)
        loss = consistency_loss(out, Tensor(aligned))
        assert loss == 0.0
        report("criterion 5 PASS: all-identity hard policy is bit-identical and the "
               "teacher-initialized twin student gives consistency loss exactly 0")


class TestCriterion06DamIdentities:
    def test_sharing_and_loss_identities(self):
        head = build_dam_head(32, 16, Rng(21))
        f = Tensor(Rng(22).normal((32, 8, 8)).astype(np.float32))
        student_branches = dam_forward(head, f)
        teacher_branches = dam_forward(head, f)
        assert dam_align_loss(student_branches, teacher_branches) == 0.0

        a = Tensor(Rng(23).normal((4, 8, 8)).astype(np.float32))
        b = Tensor(Rng(24).normal((4, 8, 8)).astype(np.float32))
        full = [DistinctiveArea(4.0, 4.0, 8.0, 8.0, 1.0)]
        masked = masked_distill_loss(a, b, full)
        plain = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
        assert abs(masked - plain) < 1e-6
        assert masked_distill_loss(a, b, []) == 0.0
        report("criterion 6 PASS: shared head gives L_D = 0 on equal inputs; full-grid "
               "area equals plain MSE within 1e-6; empty area list gives 0")


GRID_KINDS = [["identity"], ["additive_gaussian_noise"], ["feature_mask"]]


class TestCriterion07SearchVsEnumeration:
    def test_search_lands_in_oracle_top2(self, desk_task):
        t0 = time.time()
        teacher = desk_task["teacher"]
        small_train = desk_task["train"].subset(np.arange(400))
        hits = 0
        ranks = []
        for seed in range(5):
            cfg = config_from_dict({
                "seed": seed,
                "train": {"total_epochs": 60, "search_epochs": 20, "inner_lr": 0.0},
                "policy": {"subpolicies": GRID_KINDS, "init_m": 0.5,
                           "freeze_magnitudes": True},
            })
            result = run_search(cfg, teacher, small_train)
            state = init_train_state(cfg, teacher, Rng(seed))
            train_part, _ = split_train_val(small_train, cfg.train.val_fraction,
                                            Rng(seed).child("split"))
            n = min(64, len(train_part))
            f_t, _ = teacher.forward_arrays(train_part.images.data[:n])
            f_s, _ = state.student.forward_arrays(train_part.images.data[:n])
            snap = FeatureSnapshot(Tensor(f_t), Tensor(state.adapter.apply_arrays(f_s)))
            grid = PolicyGrid([SubPolicy([OpChoice(k, 0.5, 0.5) for k in kinds])
                               for kinds in GRID_KINDS])
            ranked = enumerate_policies(grid, snap, Rng(seed).child("oracle"))
            order = ["+".join(o.kind for o in cand.ops) for cand, _ in ranked]
            chosen = "+".join(o.kind for o in result.discrete.sub.ops)
            rank = order.index(chosen)
            ranks.append(rank)
            hits += rank <= 1
        elapsed = time.time() - t0
        assert hits >= 4, f"top-2 hits {hits}/5 (ranks {ranks})"
        assert elapsed < 300.0
        report(f"criterion 7 PASS: discretized search result in brute-force top 2 in "
               f"{hits}/5 seeds (ranks {ranks}), {elapsed:.0f}s")


class TestCriterion08SearchEpochStudy:
    def test_search_epoch_sweep(self, desk_task):
        t0 = time.time()
        assert RunConfig().train.search_epochs == 20  # shipped default
        teacher = desk_task["teacher"]
        small_train = desk_task["train"].subset(np.arange(800))
        for epochs in (10, 20, 30):
            cfg = config_from_dict({
                "seed": 1,
                "train": {"total_epochs": 60, "search_epochs": epochs},
            })
            result = run_search(cfg, teacher, small_train)
            val_rows = [r for r in result.metrics if r["split"] == "val"]
            assert len(val_rows) == epochs
            assert all(r["aug_loss"] is not None and np.isfinite(r["aug_loss"])
                       for r in val_rows)
        elapsed = time.time() - t0
        assert elapsed < 1200.0
        report(f"criterion 8 PASS: search completed for E in {{10, 20, 30}} with "
               f"per-epoch consistency-loss curves (default 20), {elapsed:.0f}s")


class TestCriterion09EndToEndDistillation:
    def test_five_seed_non_regression(self, desk_task):
        t0 = time.time()
        assert desk_task["teacher_top1"] >= 0.90, desk_task["teacher_top1"]
        deltas = []
        pairs = []
        for seed in range(5):
            sokd = run_full(config_from_dict({"seed": seed}), desk_task["teacher"],
                            desk_task["train"], desk_task["test"])
            base = run_full(config_from_dict({"seed": seed, "mode": "baseline"}),
                            desk_task["teacher"], desk_task["train"], desk_task["test"])
            pairs.append((sokd.final_top1, base.final_top1))
            deltas.append(sokd.final_top1 - base.final_top1)
        mean_delta = float(np.mean(deltas))
        elapsed = time.time() - t0
        assert mean_delta >= -0.002, f"mean delta {mean_delta:+.4f} (pairs {pairs})"
        assert elapsed < 1800.0
        report(f"criterion 9 PASS: teacher top-1 {desk_task['teacher_top1']:.3f} >= 0.90; "
               f"signed mean delta (sokd - baseline) over 5 seeds {mean_delta:+.4f} "
               f">= -0.002, {elapsed / 60:.1f} min")


class TestCriterion10DistributionPreservation:
    def test_noise_restricted_policy_ks(self, desk_task):
        t0 = time.time()
        teacher = desk_task["teacher"]
        hits = 0
        stats = []
        for seed in range(5):
            policy = AugPolicy(np.zeros(1), [SubPolicy(
                [OpChoice("additive_gaussian_noise", 0.5, 0.05)])])
            stat, crit = ks_preservation_report(teacher, desk_task["train"], policy,
                                                Rng(seed).child("ks"))
            stats.append(round(stat, 4))
            hits += stat < crit
        elapsed = time.time() - t0
        assert hits >= 4, f"{hits}/5 below critical (stats {stats})"
        assert elapsed < 300.0
        report(f"criterion 10 PASS: KS statistic below the 5% critical value "
               f"({ks_critical_value(8192, 8192):.4f}) in {hits}/5 seeds "
               f"(stats {stats}), {elapsed:.0f}s")


class TestCriterion11Determinism:
    def test_byte_identical_runs(self, tmp_path):
        t0 = time.time()
        data = str(tmp_path / "data")
        common = [
            f"--set=data.path={data}",
            "--set=data.classes=4", "--set=data.train_per_class=40",
            "--set=data.test_per_class=10", "--set=train.batch_size=16",
            "--set=train.total_epochs=4", "--set=train.search_epochs=2",
            "--set=train.teacher_epochs=2", "--set=dam.probe_images=2",
        ]
        assert cli_main(["gen-data", "--seed", "3", *common]) == 0
        teacher_out = str(tmp_path / "teacher")
        assert cli_main(["train-teacher", "--seed", "3", "--out", teacher_out,
                         *common]) == 0
        ckpt = f"{teacher_out}/checkpoints/teacher"
        outputs = []
        for run in ("a", "b"):
            search_out = str(tmp_path / run / "search")
            distill_out = str(tmp_path / run / "distill")
            assert cli_main(["search", "--seed", "3", "--out", search_out,
                             f"--set=train.teacher_checkpoint={ckpt}", *common]) == 0
            assert cli_main(["distill", "--seed", "3", "--out", distill_out,
                             f"--set=train.teacher_checkpoint={ckpt}",
                             f"--set=train.policy_path={search_out}/policy.json",
                             f"--set=train.student_checkpoint={search_out}/checkpoints/state",
                             *common]) == 0
            outputs.append({
                "search_metrics": Path(search_out, "metrics.csv").read_bytes(),
                "policy": Path(search_out, "policy.json").read_bytes(),
                "policy_discrete": Path(search_out, "policy_discrete.json").read_bytes(),
                "distill_metrics": Path(distill_out, "metrics.csv").read_bytes(),
            })
        for key in outputs[0]:
            assert outputs[0][key] == outputs[1][key], f"{key} differs between runs"
        elapsed = time.time() - t0
        report(f"criterion 11 PASS: repeated runs produced byte-identical metrics.csv "
               f"and policy documents, {elapsed:.0f}s")
