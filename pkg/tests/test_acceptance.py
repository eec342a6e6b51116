"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Every test exercises the shipped behavior end to end (no mocks) and checks
it against an independent oracle, a hand-computed value, or the persisted
reference-run numbers, under an explicit runtime budget where one applies.
"""

import json
import struct
import time

import numpy as np
import pytest

from vadkit.checkpoint import load_checkpoint, save_checkpoint
from vadkit.cli import main as cli_main
from vadkit.context import (
    LtcConfig,
    LtcState,
    cross_attention,
    frozen_scorer,
    fuse,
    gate_params,
    gates_from_params,
    init_gates,
    ltc_forward_stream,
    ltc_update,
    stream_backward,
    train_phase2,
)
from vadkit.detector import (
    MilHyper,
    batch_loss_and_grads,
    init_predictor,
    predictor_from_params,
    predictor_params,
    raw_video_backward,
    raw_video_forward,
    train_phase1,
)
from vadkit.experiments import ablation_grid, easy_preset, hard_preset
from vadkit.features import VideoRecord, read_features, write_features
from vadkit.instructions import (
    AnomalyPrompt,
    InstructionPair,
    Phase3Hyper,
    init_phase3_params,
    pair_loss_and_grads,
    render_pair,
    scores_to_intervals,
)
from vadkit.metrics import baseline_scorer, context_scorer, evaluate, roc_auc
from vadkit.neural import grad_check
from vadkit.synth import SynthConfig, synthesize

# Reference-run values for the frozen hard recipe, seed 42 (criterion 6).
REFERENCE_HARD_PHASE1 = (0.48631071428571426, 0.45336614583333334)  # AUC_O, AUC_A
REFERENCE_HARD_PHASE2 = (0.7254564732142857, 0.7115770833333334)


@pytest.fixture()
def announce(capsys):
    def _announce(number: int, description: str, ok: bool) -> None:
        with capsys.disabled():
            print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {description}")
        assert ok, f"criterion {number} failed: {description}"

    return _announce


class TestCriterion1:
    def phase1_instances(self, rng, n):
        worst = 0.0
        for _ in range(n):
            dim = int(rng.integers(2, 9))
            g = init_predictor(dim, int(rng.integers(2, 7)), rng)
            params = predictor_params(g)
            batch = []
            for i in range(int(rng.integers(2, 4))):
                n_clips = int(rng.integers(3, 6))
                clips = rng.normal(size=(n_clips, dim))
                batch.append((i, clips, i % 2, np.arange(n_clips)))
            _, grads = batch_loss_and_grads(params, batch, raw_video_forward, raw_video_backward)

            def fn(p):
                return batch_loss_and_grads(p, batch, raw_video_forward, raw_video_backward)[0]

            worst = max(worst, grad_check(fn, {k: v.copy() for k, v in params.items()}, grads))
        return worst

    def phase2_instances(self, rng, n):
        worst = 0.0
        for trial in range(n):
            dim = int(rng.integers(2, 5))
            g = init_predictor(dim, int(rng.integers(2, 5)), rng)
            gates = init_gates(dim, rng)
            params = {**predictor_params(g), **gate_params(gates)}
            config = LtcConfig(
                k=int(rng.integers(1, 4)),
                attention="literal" if trial % 2 == 0 else "softmax",
                use_history=bool(trial % 3),
            )
            frozen = frozen_scorer(g)

            def forward(p, vpos, clips, idx):
                det = predictor_from_params(p)
                gate_view = gates_from_params(p)
                state = LtcState(k=config.k)
                caches, scores = [], np.empty(len(idx))
                for pos, i in enumerate(idx):
                    _, scores[pos], state, cache = ltc_forward_stream(
                        det, gate_view, config, state, clips[i], int(i), frozen
                    )
                    caches.append(cache)
                return scores, caches

            batch = [
                (i, rng.normal(size=(4, dim)) * 0.5, i % 2, np.arange(4)) for i in range(3)
            ]
            _, grads = batch_loss_and_grads(params, batch, forward, stream_backward)

            def fn(p):
                return batch_loss_and_grads(p, batch, forward, stream_backward)[0]

            worst = max(worst, grad_check(fn, {k: v.copy() for k, v in params.items()}, grads))
        return worst

    def phase3_instances(self, rng, n):
        worst = 0.0
        vocab_size = 8
        for _ in range(n):
            dim = int(rng.integers(2, 5))
            hyper = Phase3Hyper(d_embed=int(rng.integers(2, 5)), max_positions=6, seed=0)
            params = init_phase3_params(vocab_size, dim, hyper, rng)
            pair = InstructionPair(
                question="q",
                answer="a",
                question_tokens=[int(t) for t in rng.integers(0, vocab_size, rng.integers(2, 5))],
                answer_tokens=[int(t) for t in rng.integers(0, vocab_size, rng.integers(1, 5))],
                prompt=AnomalyPrompt(rng.normal(size=dim), rng.normal(size=dim)),
                source="vad",
            )
            _, grads = pair_loss_and_grads(params, pair, hyper.max_positions)

            def fn(p):
                return pair_loss_and_grads(p, pair, hyper.max_positions)[0]

            worst = max(worst, grad_check(fn, {k: v.copy() for k, v in params.items()}, grads))
        return worst

    def test_gradients_match_finite_differences(self, announce):
        started = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = max(
            self.phase1_instances(rng, 7),
            self.phase2_instances(rng, 7),
            self.phase3_instances(rng, 7),
        )
        elapsed = time.perf_counter() - started
        announce(
            1,
            f"all three phase objectives match finite differences on 21 instances "
            f"(worst rel err {worst:.2e}, {elapsed:.1f}s)",
            worst <= 1e-4 and elapsed < 30.0,
        )


class TestCriterion2:
    @staticmethod
    def pairwise_oracle(scores, labels):
        s = np.asarray(scores, dtype=np.float64)
        pos = s[labels == 1][:, None]
        neg = s[labels == 0][None, :]
        return float((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size)

    def test_auc_equals_pairwise_oracle(self, announce):
        started = time.perf_counter()
        rng = np.random.default_rng(2)
        hand = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        worst = 0.0
        for trial in range(1000):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, n)
            labels[: 2] = [0, 1]  # both classes present
            if trial % 2 == 0:
                scores = rng.integers(0, 5, n) / 4.0  # tie-rich grid
            else:
                scores = np.round(rng.random(n), int(rng.integers(1, 3)))
            worst = max(worst, abs(roc_auc(scores, labels) - self.pairwise_oracle(scores, labels)))
        elapsed = time.perf_counter() - started
        announce(
            2,
            f"sort-based AUC equals the pairwise oracle on 1000 tie-rich inputs "
            f"(worst diff {worst:.2e}); hand case = {hand} ({elapsed:.1f}s)",
            worst <= 1e-12 and hand == 0.75 and elapsed < 10.0,
        )


class TestCriterion3:
    def test_lists_match_brute_force_after_every_update(self, announce):
        started = time.perf_counter()
        rng = np.random.default_rng(3)
        ok = True
        for _ in range(1000):
            n = int(rng.integers(1, 101))
            k = int(rng.integers(0, 9))
            scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)
            feats = rng.normal(size=(n, 2))
            state = LtcState(k=k)
            seen: list[tuple[int, float]] = []
            for i in range(n):
                state = ltc_update(state, float(scores[i]), feats[i], i)
                seen.append((i, float(scores[i])))
                want_n = sorted(seen, key=lambda t: (t[1], -t[0]))[:k]
                want_a = sorted(seen, key=lambda t: (-t[1], -t[0]))[:k]
                want_h = seen[-k:] if k else []
                ok = ok and [(e.arrival, e.score) for e in state.normal] == want_n
                ok = ok and [(e.arrival, e.score) for e in state.abnormal] == want_a
                ok = ok and [(e.arrival, e.score) for e in state.history] == want_h
                if not ok:
                    break
            if not ok:
                break
        elapsed = time.perf_counter() - started
        announce(
            3,
            f"memory lists equal brute-force re-ranking after every update on "
            f"1000 tie-rich streams ({elapsed:.1f}s)",
            ok and elapsed < 10.0,
        )


class TestCriterion4:
    def test_reduction_identities(self, announce):
        rng = np.random.default_rng(4)
        config = SynthConfig(
            n_videos=16, clips_per_video=8, dimension=6, anomaly_window_length=2,
            mode="hard", marker_alpha=2.0, seed=11,
        )
        train = synthesize(config, "train")
        test = synthesize(config, "test")
        hyper = MilHyper(epochs=2, batch_size=4, clips_per_video=8, hidden=8, lr_max=1e-3, seed=11)
        g = train_phase1(train, hyper).predictor
        gates = init_gates(6, rng)

        k0 = LtcConfig(k=0, attention="literal", use_normal=True, use_abnormal=True, use_history=True)
        base = evaluate(test, baseline_scorer(g))
        ctx = evaluate(test, context_scorer(g, gates, k0))
        k0_identical = (
            base.auc_overall == ctx.auc_overall and base.auc_abnormal == ctx.auc_abnormal
        )

        x = rng.normal(size=6)
        fused, _, _, _ = ltc_forward_stream(
            g, gates, LtcConfig(k=3, use_history=True), LtcState(k=3), x, 0
        )
        empty_identity = np.array_equal(fused, x)

        y = rng.normal(size=4)
        zero_gates = np.array_equal(
            fuse(y, [(0.0, rng.normal(size=4)), (0.0, rng.normal(size=4))]), y
        )
        announce(
            4,
            "k=0 evaluation bit-equals the raw baseline on both AUCs; empty memory "
            "and zero gate weights return the raw feature exactly",
            k0_identical and empty_identity and zero_gates,
        )


class TestCriterion5:
    def test_literal_attention_algebra(self, announce):
        orthonormal = np.array_equal(
            cross_attention(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]), "literal"),
            np.array([1.0, 0.0]),
        )
        scaled = np.array_equal(
            cross_attention(np.array([2.0, 0.0]), np.array([[1.0, 0.0]]), "literal"),
            np.array([2.0, 0.0]),
        )
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(25):
            dim = int(rng.integers(2, 9))
            feats = rng.normal(size=(int(rng.integers(1, 5)), dim))
            x, y = rng.normal(size=dim), rng.normal(size=dim)
            alpha = float(rng.normal())
            fx = cross_attention(x, feats, "literal")
            fy = cross_attention(y, feats, "literal")
            additivity = np.abs(cross_attention(x + y, feats, "literal") - fx - fy).max()
            homogeneity = np.abs(cross_attention(alpha * x, feats, "literal") - alpha * fx).max()
            worst = max(worst, additivity, homogeneity)
        announce(
            5,
            f"literal attention reproduces both hand cases exactly and is linear "
            f"in the query (worst deviation {worst:.2e})",
            orthonormal and scaled and worst <= 1e-12,
        )


class TestCriterion6:
    def test_hard_mode_context_gain_and_ablation_direction(self, announce):
        started = time.perf_counter()
        preset = hard_preset(42)
        train = synthesize(preset.synth, "train")
        test = synthesize(preset.synth, "test")
        phase1 = train_phase1(train, preset.phase1)
        rep1 = evaluate(test, baseline_scorer(phase1.predictor))
        phase2 = train_phase2(train, phase1.predictor, preset.phase2, preset.ltc)
        rep2 = evaluate(test, context_scorer(phase2.predictor, phase2.gates, preset.ltc))
        rows = {
            r.row: r
            for r in ablation_grid(
                train, test, phase1.predictor, preset.phase2, preset.ltc, 42
            )
        }
        elapsed = time.perf_counter() - started

        gain = rep2.auc_abnormal - rep1.auc_abnormal
        full = rows["normal+abnormal+history"].auc_abnormal
        base = rows["baseline"].auc_abnormal
        regression = max(
            abs(rep1.auc_overall - REFERENCE_HARD_PHASE1[0]),
            abs(rep1.auc_abnormal - REFERENCE_HARD_PHASE1[1]),
            abs(rep2.auc_overall - REFERENCE_HARD_PHASE2[0]),
            abs(rep2.auc_abnormal - REFERENCE_HARD_PHASE2[1]),
        )
        announce(
            6,
            f"hard-mode reference run: phase-2 AUC_A {rep2.auc_abnormal:.4f} vs "
            f"phase-1 {rep1.auc_abnormal:.4f} (gain {gain:+.4f} >= 0.05); ablation "
            f"full row {full:.4f} >= baseline {base:.4f}; reference regression "
            f"{regression:.2e} <= 1e-9 ({elapsed:.0f}s)",
            gain >= 0.05 and full >= base and regression <= 1e-9 and elapsed < 600.0,
        )


class TestCriterion7:
    def test_easy_mode_smoke(self, announce):
        started = time.perf_counter()
        preset = easy_preset(42)
        train = synthesize(preset.synth, "train")
        test = synthesize(preset.synth, "test")
        result = train_phase1(train, preset.phase1)
        report = evaluate(test, baseline_scorer(result.predictor))
        elapsed = time.perf_counter() - started
        announce(
            7,
            f"easy-mode phase-1 baseline reaches AUC_O {report.auc_overall:.4f} >= 0.95 "
            f"({elapsed:.0f}s)",
            report.auc_overall >= 0.95 and elapsed < 120.0,
        )


class TestCriterion8:
    def test_instruction_rendering_and_interval_merging(self, announce):
        intervals = scores_to_intervals([0.1, 0.2, 0.1, 0.9], clip_duration=0.5)
        _, answer = render_pair(intervals, "A video.")
        sentence_ok = (
            intervals == [(1.5, 2.0)]
            and "Yes, there are anomalies from 1.5s to 2s." in answer
        )

        rng = np.random.default_rng(8)
        merging_ok = True
        for _ in range(1000):
            n = int(rng.integers(1, 51))
            scores = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
            duration = float(rng.choice([0.25, 0.5, 1.0]))
            got = scores_to_intervals(scores, duration)
            want = []
            i = 0
            while i < n:
                if scores[i] > 0.5:
                    j = i
                    while j + 1 < n and scores[j + 1] > 0.5:
                        j += 1
                    want.append((i * duration, (j + 1) * duration))
                    i = j + 1
                else:
                    i += 1
            if got != want:
                merging_ok = False
                break
        announce(
            8,
            "rendered answer contains the exact anomaly sentence; interval merging "
            "matches per-clip brute force on 1000 random score vectors",
            sentence_ok and merging_ok,
        )


class TestCriterion9:
    INI = """
[synth]
n_videos = 10
clips_per_video = 8
dimension = 6
anomaly_window_length = 2
mode = easy
marker_alpha = 1.0

[phase1]
epochs = 2
batch_size = 4
clips_per_video = 8
hidden = 8
lr_max = 1e-3

[phase2]
epochs = 2
batch_size = 4
clips_per_video = 8
hidden = 8
lr_max = 1e-3

[memory]
k = 2

[phase3]
iterations = 10
batch_size = 2
d_embed = 8
"""

    def run_pipeline(self, ini, out):
        for argv in (
            ["synth"],
            ["train-phase1"],
            ["train-phase2"],
            ["train-phase3"],
            ["eval"],
        ):
            assert cli_main([*argv, "--config", str(ini), "--out", str(out)]) == 0
        artifacts = {}
        for sub in ("checkpoints", "reports"):
            for path in sorted((out / sub).iterdir()):
                artifacts[f"{sub}/{path.name}"] = path.read_bytes()
        return artifacts

    def test_full_pipeline_bit_identical(self, announce, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text(self.INI)
        first = self.run_pipeline(ini, tmp_path / "a")
        second = self.run_pipeline(ini, tmp_path / "b")
        names_ok = set(first) == set(second) and {
            "checkpoints/phase1.ckpt",
            "checkpoints/phase2.ckpt",
            "checkpoints/phase3.ckpt",
            "reports/report.json",
        } <= set(first)
        announce(
            9,
            f"rerunning the full CLI pipeline reproduces all {len(first)} checkpoint "
            f"and report files bit-identically",
            names_ok and first == second,
        )


class TestCriterion10:
    def test_format_roundtrips_and_byte_layout(self, announce, tmp_path):
        rng = np.random.default_rng(10)

        clips = rng.normal(size=(5, 3)).astype(np.float32)
        record = VideoRecord(id="v", label=1, clips=clips)
        write_features(record, tmp_path / "v.vadf")
        feature_roundtrip = np.array_equal(
            read_features(tmp_path / "v.vadf").clips, clips
        )

        layout = VideoRecord(id="w", label=0, clips=np.array([[1.5, -2.25]], dtype=np.float32))
        write_features(layout, tmp_path / "w.vadf")
        expected = b"VADF" + struct.pack("<III", 1, 1, 2) + struct.pack("<2f", 1.5, -2.25)
        layout_ok = (tmp_path / "w.vadf").read_bytes() == expected

        params = {
            "a.w": rng.normal(size=(3, 2)),
            "a.b": np.array([1e-300, -0.0, 1e300]),
        }
        save_checkpoint(tmp_path / "c.ckpt", "demo", params)
        loaded, _ = load_checkpoint(tmp_path / "c.ckpt", "demo")
        ckpt_roundtrip = all(
            loaded[k].tobytes() == params[k].tobytes() for k in params
        ) and list(loaded) == list(params)

        raw = (tmp_path / "c.ckpt").read_bytes()
        header_len = struct.unpack("<I", raw[:4])[0]
        header = json.loads(raw[4 : 4 + header_len])
        payload = np.frombuffer(raw[4 + header_len :], dtype="<f8")
        manual_parse = (
            header["kind"] == "demo"
            and [p["name"] for p in header["params"]] == ["a.w", "a.b"]
            and payload.tobytes()
            == params["a.w"].tobytes() + params["a.b"].tobytes()
        )
        announce(
            10,
            "feature files and checkpoints round-trip exactly; documented byte "
            "layouts match bit-for-bit (1-clip/d=2 feature file, u32+JSON+f8 checkpoint)",
            feature_roundtrip and layout_ok and ckpt_roundtrip and manual_parse,
        )
