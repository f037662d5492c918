import pytest
import torch

from ssankit.config import ModelConfig
from ssankit.global_branch import DegenerateFeatureError, cosine
from ssankit.model import SSAN
from ssankit.pfl import PartFeatureLearning, WordAttention, part_similarity, weight_text
from oracles import fd_max_rel_error, ref_cosine


def test_zero_attention_scores_half():
    att = WordAttention(8, 3)
    assert torch.equal(att(torch.randn(2, 5, 8)), torch.full((2, 5, 3), 0.5))


def test_scores_open_interval():
    att = WordAttention(8, 3)
    torch.nn.init.normal_(att.score.weight)
    s = att(torch.randn(4, 6, 8))
    assert ((s > 0) & (s < 1)).all()


def test_scores_independent_across_parts():
    torch.manual_seed(0)
    att = WordAttention(6, 3)
    torch.nn.init.normal_(att.score.weight)
    words = torch.randn(1, 4, 6)
    before = att(words)
    with torch.no_grad():
        att.score.weight[1] += torch.randn(6)
    after = att(words)
    assert torch.equal(before[..., [0, 2]], after[..., [0, 2]])
    assert not torch.equal(before[..., 1], after[..., 1])


class TestWeightText:
    words = torch.randn(2, 4, 5)

    def test_ones_identity(self):
        assert torch.equal(weight_text(self.words, torch.ones(2, 4, 3), 1), self.words)

    def test_halves(self):
        assert torch.equal(weight_text(self.words, torch.full((2, 4, 3), 0.5), 0), self.words / 2)

    def test_loop_oracle(self):
        scores = torch.rand(2, 4, 3)
        out = weight_text(self.words, scores, 2)
        for b in range(2):
            for i in range(4):
                for c in range(5):
                    assert out[b, i, c].item() == pytest.approx(self.words[b, i, c].item() * scores[b, i, 2].item())


def test_identity_projection_single_word():
    pfl = PartFeatureLearning(4, 4, 2)
    torch.nn.init.normal_(pfl.attention.score.weight)
    with torch.no_grad():
        for p in pfl.proj:
            p.weight.copy_(torch.eye(4))
    words = torch.randn(1, 1, 4)
    feats, scores = pfl.textual(words, torch.ones(1, 1, dtype=torch.bool))
    for k in range(2):
        assert torch.allclose(feats[0, k], scores[0, 0, k] * words[0, 0])


def test_rmp_of_weighted_bank_loop_oracle():
    torch.manual_seed(1)
    pfl = PartFeatureLearning(3, 3, 2)
    torch.nn.init.normal_(pfl.attention.score.weight)
    with torch.no_grad():
        for p in pfl.proj:
            p.weight.copy_(torch.eye(3))
    words = torch.randn(1, 4, 3)
    mask = torch.tensor([[True, True, True, False]])
    feats, s = pfl.textual(words, mask)
    for k in range(2):
        ref = [max(s[0, i, k].item() * words[0, i, c].item() for i in range(3)) for c in range(3)]
        assert feats[0, k].tolist() == pytest.approx(ref)


def test_visual_bands_top_to_bottom():
    pfl = PartFeatureLearning(2, 2, 3)
    with torch.no_grad():
        for p in pfl.proj:
            p.weight.copy_(torch.eye(2))
    fmap = torch.zeros(1, 2, 6, 1)
    fmap[0, :, 4:] = 9.0
    feats = pfl.visual(fmap)
    assert feats[0, :, 0].tolist() == [0.0, 0.0, 9.0]


def test_projections_shared_between_modalities():
    model = SSAN(ModelConfig.tiny())
    projs = list(model.pfl.proj)
    assert len({id(p) for p in projs}) == 3
    fmap, words = torch.randn(1, 32, 6, 2), torch.randn(1, 4, 32)
    mask = torch.ones(1, 4, dtype=torch.bool)
    v_before = model.pfl.visual(fmap)
    t_before, _ = model.pfl.textual(words, mask)
    with torch.no_grad():
        projs[1].bias += 1.0
    v_after = model.pfl.visual(fmap)
    t_after, _ = model.pfl.textual(words, mask)
    for before, after in ((v_before, v_after), (t_before, t_after)):
        assert torch.allclose(after[:, 1] - before[:, 1], torch.ones(1, 32))
        assert torch.equal(after[:, [0, 2]], before[:, [0, 2]])


def test_padding_never_reaches_part_features():
    torch.manual_seed(2)
    pfl = PartFeatureLearning(4, 3, 2)
    torch.nn.init.normal_(pfl.attention.score.weight)
    words = torch.randn(1, 5, 4)
    mask = torch.tensor([[True, True, False, False, False]])
    noisy = words.clone()
    noisy[0, 2:] = 50.0
    assert torch.equal(pfl.textual(words, mask)[0], pfl.textual(noisy, mask)[0])


class TestPartSimilarity:
    def test_identical(self):
        x = torch.randn(3, 4)
        assert part_similarity(x, x).item() == pytest.approx(1.0)

    def test_single_part(self):
        a, b = torch.randn(1, 5), torch.randn(1, 5)
        assert torch.allclose(part_similarity(a, b), cosine(a[0], b[0]))

    def test_flatten_oracle(self):
        a, b = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
        expected = ref_cosine(a.flatten().tolist(), b.flatten().tolist())
        assert part_similarity(a, b).item() == pytest.approx(expected, abs=1e-12)

    def test_zero(self):
        with pytest.raises(DegenerateFeatureError):
            part_similarity(torch.zeros(2, 3), torch.ones(2, 3))


@pytest.mark.parametrize("seed", range(3))
def test_gradient_wam_to_pfl(seed):
    torch.manual_seed(seed)
    pfl = PartFeatureLearning(4, 3, 2).double()
    torch.nn.init.normal_(pfl.attention.score.weight)
    fmap = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    words = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    mask = torch.ones(1, 3, dtype=torch.bool)
    fn = lambda: part_similarity(pfl.visual(fmap)[0], pfl.textual(words, mask)[0][0])
    assert fd_max_rel_error(fn, [words, *pfl.parameters()]) <= 1e-4
