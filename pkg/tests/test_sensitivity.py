import numpy as np
import pytest

from eitproj.errors import ConfigError, ContractError
from eitproj.forward import ContactState, assemble, forward_map, make_patterns, measure, solve
from eitproj.sensitivity import (
    auxiliary_solution,
    canonical_aux,
    jacobian,
    jacobian_position,
    jacobian_sigma,
    jacobian_zeta,
    load_jacobian,
    save_jacobian,
)


def _column_error(fd, col):
    return np.linalg.norm(fd - col) / np.linalg.norm(col)


@pytest.fixture(scope="module")
def blocks(small_forward):
    return {k: jacobian(small_forward, k) for k in ("sigma", "zeta", "theta", "phi")}


def test_shapes_and_mean_free_blocks(small_forward, blocks):
    M, N = small_forward.system.M, small_forward.N
    n = small_forward.system.n
    assert blocks["sigma"].matrix.shape == (M * N, n)
    for k in ("zeta", "theta", "phi"):
        assert blocks[k].matrix.shape == (M * N, M)
    for b in blocks.values():
        sums = b.matrix.reshape(N, M, -1).sum(axis=1)
        assert np.max(np.abs(sums)) <= 1e-12 * np.abs(b.matrix).max()
        assert np.all(np.isfinite(b.matrix))


def test_sigma_columns_match_central_differences(small_forward, blocks):
    s = small_forward.system
    h = 1e-4 * s.sigma.mean()
    rng = np.random.default_rng(5)
    for j in rng.choice(s.n, 6, replace=False):
        e = np.zeros(s.n)
        e[j] = h
        up = forward_map(s.mesh, s.layout, s.sigma + e, s.contact, small_forward.patterns)
        dn = forward_map(s.mesh, s.layout, s.sigma - e, s.contact, small_forward.patterns)
        assert _column_error((up - dn) / (2 * h), blocks["sigma"].matrix[:, j]) < 1e-5


def test_zeta_columns_match_central_differences(small_forward, blocks):
    s = small_forward.system
    for m in range(s.M):
        h = 1e-3 * s.contact.peaks[m]
        dp = np.zeros(s.M)
        dp[m] = h
        up = forward_map(s.mesh, s.layout, s.sigma, s.contact.with_peaks(s.contact.peaks + dp), small_forward.patterns)
        dn = forward_map(s.mesh, s.layout, s.sigma, s.contact.with_peaks(s.contact.peaks - dp), small_forward.patterns)
        assert _column_error((up - dn) / (2 * h), blocks["zeta"].matrix[:, m]) < 1e-5


def test_euler_identity(small_forward, blocks):
    s = small_forward.system
    U = measure(small_forward)
    lhs = blocks["sigma"].matrix @ s.sigma + blocks["zeta"].matrix @ s.contact.peaks
    assert np.linalg.norm(lhs + U) <= 1e-8 * np.linalg.norm(U)


@pytest.mark.parametrize("which", ["phi", "theta"])
def test_position_columns_match_geometric_differences(small_forward, blocks, which):
    s = small_forward.system
    delta = 1e-4
    col_norms = np.linalg.norm(blocks[which].matrix, axis=0)
    for m in range(s.M):
        moves = [{f"d{which}": d} for d in (delta, -delta)]
        vals = [forward_map(s.mesh, s.layout.moved(s.mesh, m, **mv), s.sigma, s.contact, small_forward.patterns) for mv in moves]
        fd = (vals[0] - vals[1]) / (2 * delta)
        if col_norms[m] < 1e-3 * col_norms.max():
            # nearly vanishing column: compare on the scale of the block
            assert np.linalg.norm(fd - blocks[which].matrix[:, m]) < 5e-3 * col_norms.max()
        else:
            assert _column_error(fd, blocks[which].matrix[:, m]) < 5e-3


def test_position_blocks_nonzero_and_distinct(blocks):
    t, p = blocks["theta"].matrix, blocks["phi"].matrix
    assert np.all(np.linalg.norm(p, axis=0) > 1e-12)
    assert np.all(np.linalg.norm(t, axis=0) > 1e-12)
    assert np.linalg.norm(t - p) > 1e-3 * np.linalg.norm(p)


def test_zeta_columns_shrink_for_large_contacts(small_forward, blocks):
    s = small_forward.system
    big = solve(assemble(s.mesh, s.layout, s.sigma, s.contact.scaled(100.0)), small_forward.patterns)
    before = np.linalg.norm(blocks["zeta"].matrix, axis=0)
    after = np.linalg.norm(jacobian_zeta(big).matrix, axis=0)
    assert np.all(after < before)


def test_aux_basis_choice_does_not_change_jacobian(small_forward, blocks):
    s = small_forward.system
    other = make_patterns("fourier", s.M)
    jz = jacobian_zeta(small_forward, aux_basis=other)
    np.testing.assert_allclose(jz.matrix, blocks["zeta"].matrix, atol=1e-10 * np.abs(jz.matrix).max())


def test_aux_must_share_the_linearization_point(small_forward):
    s = small_forward.system
    other = solve(assemble(s.mesh, s.layout, 2 * s.sigma, s.contact), canonical_aux(s.M))
    with pytest.raises(ContractError):
        jacobian_sigma(small_forward, aux_basis=other)
    with pytest.raises(ContractError):
        auxiliary_solution(small_forward, make_patterns("adjacent", s.M))


def test_unknown_kind(small_forward):
    with pytest.raises(ConfigError):
        jacobian(small_forward, "tau")
    with pytest.raises(ConfigError):
        jacobian_position(small_forward, which="psi")


@pytest.mark.parametrize("fmt", ["npy", "csv"])
def test_save_load_round_trip(tmp_path, blocks, fmt):
    side = save_jacobian(tmp_path / "jz", blocks["zeta"], fmt)
    back = load_jacobian(side)
    np.testing.assert_array_equal(back.matrix, blocks["zeta"].matrix)
    assert (back.kind, back.M, back.N) == ("zeta", blocks["zeta"].M, blocks["zeta"].N)
