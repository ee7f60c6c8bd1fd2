import itertools
import math
import warnings

import numpy as np
import pytest

from trage.classify import (
    ClassifierHead,
    FinetuneConfig,
    FlowClassifier,
    FlowSample,
    evaluate,
    finetune,
    flow_representation,
    group_by_label,
    load_manifest,
    packet_representation,
    sample_and_split,
    softmax,
    write_confusion_csv,
    write_metrics_csv,
)
from trage.encoder import EncoderConfig, EncoderParams
from trage.errors import DegenerateDataset, LengthMismatch, ManifestMismatch, TooFewFlows
from trage.synthetic import synth_flows, write_synthetic_dataset
from trage.training import Checkpoint


def tiny_checkpoint(seed=0, header_len=24, payload_len=16, hidden=16):
    rng = np.random.default_rng(seed)
    h = EncoderParams.init(EncoderConfig(max_len=header_len, hidden=hidden, layers=1, heads=2), rng)
    p = EncoderParams.init(EncoderConfig(max_len=payload_len, hidden=hidden, layers=1, heads=2), rng)
    return Checkpoint(header=h, payload=p, step=0, base_seed=seed)


def brute_force_metrics(pred, true, n_classes):
    """Count-by-loop oracle, independent of the vectorised implementation."""
    conf = [[0] * n_classes for _ in range(n_classes)]
    for t, p in zip(true, pred):
        conf[t][p] += 1
    per = []
    for c in range(n_classes):
        tp = conf[c][c]
        fp = sum(conf[r][c] for r in range(n_classes)) - tp
        fn = sum(conf[c]) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per.append((prec, rec, f1))
    present = sorted(set(true))
    macro = [math.fsum(per[c][k] for c in present) / len(present) for k in range(3)]
    return conf, per, macro


class TestEvaluate:
    def test_perfect(self):
        m = evaluate([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m.macro_precision == m.macro_recall == m.macro_f1 == 1.0

    def test_all_zero_prediction(self):
        m = evaluate([0, 0, 0, 0], [0, 0, 1, 1], 2)
        assert m.precision[0] == 0.5 and m.recall[0] == 1.0
        assert m.f1[0] == pytest.approx(2 / 3)
        assert (m.precision[1], m.recall[1], m.f1[1]) == (0.0, 0.0, 0.0)
        assert m.macro_f1 == pytest.approx(1 / 3)

    def test_label_permutation_symmetry(self):
        rng = np.random.default_rng(0)
        true = rng.integers(0, 4, 50)
        pred = rng.integers(0, 4, 50)
        perm = np.array([2, 0, 3, 1])
        a, b = evaluate(pred, true, 4), evaluate(perm[pred], perm[true], 4)
        assert a.macro_f1 == pytest.approx(b.macro_f1, abs=1e-15)
        assert a.macro_precision == pytest.approx(b.macro_precision, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate([0, 1], [0], 2)

    def test_confusion_rows_are_supports(self):
        m = evaluate([0, 1, 1, 2, 2, 2], [0, 0, 1, 1, 2, 2], 3)
        assert m.confusion.sum(1).tolist() == m.support.tolist() == [2, 2, 2]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            c = int(rng.integers(1, 11))
            n = int(rng.integers(1, 201))
            true = rng.integers(0, c, n).tolist()
            pred = rng.integers(0, c, n).tolist()
            m = evaluate(pred, true, c)
            conf, per, macro = brute_force_metrics(pred, true, c)
            assert m.confusion.tolist() == conf
            assert [tuple(x) for x in zip(m.precision, m.recall, m.f1)] == per
            assert [m.macro_precision, m.macro_recall, m.macro_f1] == macro

    def test_csv_outputs(self, tmp_path):
        m = evaluate([0, 1, 1], [0, 1, 0], 2)
        write_metrics_csv(tmp_path / "m.csv", m, ["a", "b"])
        write_confusion_csv(tmp_path / "c.csv", m, ["a", "b"])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "class,precision,recall,f1,support"
        assert lines[-1].startswith("macro,")
        assert (tmp_path / "c.csv").read_text().splitlines()[1] == "a,1,1"


class TestSplit:
    def fixture(self):
        return {0: list(range(6000)), 1: list(range(100)), 2: list(range(10))}

    @pytest.mark.parametrize("seed", range(1, 21))
    def test_contract(self, seed):
        split = sample_and_split(self.fixture(), cap=5000, seed=seed)
        sizes = {}
        for name in ("train", "val", "test"):
            for s in getattr(split, name):
                sizes.setdefault(s.label, [0, 0, 0])[("train", "val", "test").index(name)] += 1
        assert sizes == {0: [4000, 500, 500], 1: [80, 10, 10], 2: [8, 1, 1]}
        for label in (0, 1, 2):
            members = [[s.flow for s in getattr(split, n) if s.label == label] for n in ("train", "val", "test")]
            flat = list(itertools.chain(*members))
            assert len(flat) == len(set(flat))  # disjoint, no repeats

    def test_deterministic(self):
        a = sample_and_split(self.fixture(), seed=7)
        b = sample_and_split(self.fixture(), seed=7)
        assert [s.flow for s in a.test] == [s.flow for s in b.test]
        c = sample_and_split(self.fixture(), seed=8)
        assert [s.flow for s in a.test] != [s.flow for s in c.test]

    def test_small_class_dropped(self):
        with pytest.warns(TooFewFlows):
            split = sample_and_split({0: list(range(50)), 1: list(range(9))}, seed=1)
        assert split.dropped == [1]
        assert {s.label for s in split.train} == {0}


@pytest.fixture(scope="module")
def flows():
    return synth_flows(12, n_classes=2, seed=3)


@pytest.fixture(scope="module")
def ckpt():
    return tiny_checkpoint()


class TestRepresentation:
    def test_packet_vector(self, flows, ckpt):
        rec = flows[0].packets[0]
        v = packet_representation(ckpt.header, ckpt.payload, rec)
        assert v.shape == (32,)
        assert np.array_equal(v, packet_representation(ckpt.header, ckpt.payload, rec))

    def test_payload_perturbation_touches_payload_half(self, flows, ckpt):
        rec = next(p for f in flows for p in f.packets if p.payload_bytes)
        before = packet_representation(ckpt.header, ckpt.payload, rec)
        payload = ckpt.payload.copy()
        payload["tok_emb"][:] = 0.0
        after = packet_representation(ckpt.header, payload, rec)
        assert np.array_equal(before[:16], after[:16])
        assert not np.allclose(before[16:], after[16:])

    def test_empty_payload(self, ckpt):
        rec = next(p for f in synth_flows(6, 2, seed=1) for p in f.packets if not p.payload_bytes)
        assert packet_representation(ckpt.header, ckpt.payload, rec).shape == (32,)

    def test_flow_mean(self):
        v = np.arange(4.0)
        assert np.array_equal(flow_representation([v]), v)
        assert np.array_equal(flow_representation([v, v]), v)
        vecs = [np.full(3, float(i)) for i in range(7)]
        assert np.array_equal(flow_representation(vecs), np.full(3, 2.0))
        assert np.array_equal(flow_representation(vecs), flow_representation(vecs[:5] + [np.full(3, 99.0)]))

    def test_model_flow_vectors_match_reference(self, flows, ckpt):
        model = FlowClassifier.from_checkpoint(ckpt, 2, FinetuneConfig())
        got = model.flow_vectors(flows[:4])
        for f, row in zip(flows[:4], got):
            ref = flow_representation([packet_representation(ckpt.header, ckpt.payload, p) for p in f.packets])
            np.testing.assert_allclose(row, ref, rtol=1e-5, atol=1e-6)

    def test_concat_fusion(self, flows, ckpt):
        model = FlowClassifier.from_checkpoint(ckpt, 2, FinetuneConfig(fusion="concat"))
        vecs = model.flow_vectors(flows[:2])
        assert vecs.shape == (2, 5 * 32)
        first = packet_representation(ckpt.header, ckpt.payload, flows[0].packets[0])
        np.testing.assert_allclose(vecs[0, :32], first, rtol=1e-5, atol=1e-6)


class TestHead:
    def test_probabilities(self):
        head = ClassifierHead.init(8, 16, 3, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(0, 10, (20, 8)).astype(np.float32)
        p = head.probs(x)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        head = ClassifierHead.init(4, 6, 3, rng, dtype=np.float64)
        head.tensors = {k: v + rng.normal(0, 0.5, v.shape) for k, v in head.tensors.items()}
        x = rng.normal(size=(5, 4))
        y = np.array([0, 2, 1, 1, 0])

        def loss():
            return -np.log(softmax(head.logits(x)[0])[np.arange(5), y]).mean()

        logits, cache = head.logits(x)
        d = softmax(logits)
        d[np.arange(5), y] -= 1
        grads, _ = head.backward(cache, d / 5)
        for name, t in head.tensors.items():
            flat = t.reshape(-1)
            for i in range(flat.size):
                o = flat[i]
                flat[i] = o + 1e-6
                up = loss()
                flat[i] = o - 1e-6
                down = loss()
                flat[i] = o
                assert grads[name].reshape(-1)[i] == pytest.approx((up - down) / 2e-6, abs=1e-7)


class TestFinetune:
    def samples(self, flows):
        return [FlowSample(f, f.label) for f in flows]

    def test_epochs_zero(self, flows, ckpt):
        res = finetune(FinetuneConfig(epochs=0), self.samples(flows), [], ckpt)
        assert res.model.encoder_checksums() == (ckpt.header.checksum(), ckpt.payload.checksum())
        fresh = FlowClassifier.from_checkpoint(ckpt, 2, FinetuneConfig())
        assert all(np.array_equal(fresh.head.tensors[k], res.model.head.tensors[k]) for k in fresh.head.tensors)

    def test_freeze(self, flows, ckpt):
        res = finetune(FinetuneConfig(epochs=2, freeze_encoders=True, lr=1e-3),
                       self.samples(flows[:16]), self.samples(flows[16:]), ckpt)
        assert res.model.encoder_checksums() == (ckpt.header.checksum(), ckpt.payload.checksum())

    def test_full_finetune_moves_encoders(self, flows, ckpt):
        res = finetune(FinetuneConfig(epochs=1), self.samples(flows[:16]), self.samples(flows[16:]), ckpt)
        h, p = res.model.encoder_checksums()
        assert h != ckpt.header.checksum() and p != ckpt.payload.checksum()
        # the checkpoint itself is left alone
        assert ckpt.header.checksum() == tiny_checkpoint().header.checksum()

    def test_single_class_rejected(self, flows, ckpt):
        one = [s for s in self.samples(flows) if s.label == 0]
        with pytest.raises(DegenerateDataset):
            finetune(FinetuneConfig(epochs=1), one, [], ckpt)

    def test_separable_reaches_perfect_validation(self, ckpt):
        data = self.samples(synth_flows(40, 2, seed=11))
        split = sample_and_split(group_by_label(data), seed=0)
        # random encoders: full fine-tuning at a larger rate than the pre-trained default
        res = finetune(FinetuneConfig(epochs=10, lr=1e-3, batch_size=8),
                       split.train, split.val, ckpt)
        assert res.best_val_f1 == 1.0

    def test_save_load(self, flows, ckpt, tmp_path):
        model = FlowClassifier.from_checkpoint(ckpt, 2, FinetuneConfig(), ["a", "b"])
        model.save(tmp_path / "clf.trge")
        back = FlowClassifier.load(tmp_path / "clf.trge")
        assert back.class_names == ["a", "b"]
        np.testing.assert_array_equal(back.predict_proba(flows[:5]), model.predict_proba(flows[:5]))


class TestManifest:
    def test_load(self, tmp_path):
        manifest = write_synthetic_dataset(tmp_path, flows_per_class=4, n_classes=2, seed=0)
        samples, names = load_manifest(manifest)
        assert names == ["0", "1"] and len(samples) == 8
        assert [s.label for s in samples] == [0] * 4 + [1] * 4
        assert all(s.flow.packets for s in samples)

    def test_bad_index(self, tmp_path):
        manifest = write_synthetic_dataset(tmp_path, flows_per_class=2, n_classes=2, seed=0)
        text = manifest.read_text().replace(",1,0", ",9,0")
        manifest.write_text(text)
        with pytest.raises(ManifestMismatch):
            load_manifest(manifest)

    def test_missing_columns(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ManifestMismatch):
            load_manifest(tmp_path / "m.csv")
