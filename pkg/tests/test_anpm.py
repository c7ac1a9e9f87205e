import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from procns.anpm import anpm_round, extract_masks, onehot_argmax, reassign_noisy, update_denoised_label


def vec(*v):
    return torch.tensor(v, dtype=torch.float32).view(-1, 1, 1)


def test_perfect_agreement():
    g = torch.Generator().manual_seed(0)
    pred = torch.softmax(torch.randn(2, 3, 6, 6, generator=g), 1)
    label = onehot_argmax(pred)
    m_r, m_n = extract_masks(pred, label)
    assert (m_n == 0).all() and torch.equal(m_r, label)


def test_disagreement_pixel():
    m_r, m_n = extract_masks(vec(0.2, 0.8), vec(1, 0))
    assert m_r.flatten().tolist() == [0, 0] and m_n.flatten().tolist() == [1, 1]


def test_already_masked_pixel():
    m_r, m_n = extract_masks(vec(0.2, 0.8), vec(0, 0))
    assert m_r.flatten().tolist() == [0, 0] and m_n.flatten().tolist() == [0, 1]


@pytest.mark.parametrize("c", [2, 3])
def test_exhaustive_one_pixel(c):
    eye = torch.eye(c)
    labels = [eye[k] for k in range(c)] + [torch.zeros(c)]
    cases = 0
    for k, lab in itertools.product(range(c), labels):
        pred = eye[k] * 0.5 + 0.5 / c
        m_r, m_n = extract_masks(pred.view(c, 1, 1), lab.view(c, 1, 1))
        assert (m_r * m_n == 0).all()
        # reliable iff the prediction agrees with a labeled pixel
        agree = bool(lab[k] == 1)
        assert m_r.flatten().tolist() == (eye[k].tolist() if agree else [0.0] * c)
        assert torch.equal(m_r + m_n, ((eye[k] + lab) > 0).float().view(c, 1, 1))
        cases += 1
    assert cases == c * (c + 1)


def test_update_examples():
    lab = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).view(2, 1, 2)
    assert torch.equal(update_denoised_label(lab.clone(), lab), lab)
    assert (update_denoised_label(torch.zeros_like(lab), lab) == 0).all()
    keep = torch.tensor([[1.0, 0.0], [0.0, 0.0]]).view(2, 1, 2)
    out = update_denoised_label(keep, lab)
    assert out[:, 0, 0].tolist() == [1, 0] and out[:, 0, 1].tolist() == [0, 0]


def test_reassign_examples():
    p, ph = vec(0.7, 0.3), vec(0.2, 0.8)
    a, b = reassign_noisy(torch.zeros(2, 1, 1), p, ph)
    assert (a == 0).all() and (b == 0).all()
    a, b = reassign_noisy(vec(1, 1), p, ph)
    assert torch.allclose(a, p) and torch.allclose(b, ph)
    a, b = reassign_noisy(vec(1, 0), p, ph)
    assert a.flatten().tolist() == pytest.approx([0.7, 0]) and b.flatten().tolist() == pytest.approx([0.2, 0])


def test_soft_target_detached():
    ph = vec(0.2, 0.8).requires_grad_(True)
    p = vec(0.7, 0.3).requires_grad_(True)
    a, b = reassign_noisy(vec(1, 1), p, ph)
    assert a.requires_grad and not b.requires_grad


def test_ties_lowest_index():
    o = onehot_argmax(vec(0.5, 0.5))
    assert o.flatten().tolist() == [1, 0]
    m1 = extract_masks(vec(0.5, 0.5), vec(0, 1))
    m2 = extract_masks(vec(0.5, 0.5), vec(0, 1))
    assert all(torch.equal(a, b) for a, b in zip(m1, m2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_support_monotone(seed, c):
    g = torch.Generator().manual_seed(seed)
    label = onehot_argmax(torch.rand(1, c, 8, 8, generator=g))
    for _ in range(5):
        new, m_r, m_n = anpm_round(torch.rand(1, c, 8, 8, generator=g), label)
        assert (new <= label).all()
        assert (m_r * m_n == 0).all()
        label = new


def test_round_identity():
    label = torch.zeros(1, 3, 4, 4)
    label[0, 0, :2] = 1
    label[0, 2, 2:] = 1
    new, _, m_n = anpm_round(label * 0.9 + 0.05, label)
    assert torch.equal(new, label) and (m_n == 0).all()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        extract_masks(torch.zeros(2, 3, 3), torch.zeros(3, 3, 3))
