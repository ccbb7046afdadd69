"""Voronoi-cell losses between a fitted mixing measure and the ground truth.

Every fitted atom joins the cell of the nearest ground-truth atom, distance
taken in Euclidean norm over the concatenated (expert parameters, variance)
vector; exact ties go to the lowest ground-truth index. Both losses share the
structure

    sum_j |cell mass - true mass|                       (mass mismatch)
    + sum over singleton cells of  mass * (first-power parameter errors)
    + sum over larger cells of     mass * (squared parameter errors)

first powers reflecting the faster rate available when an atom has a cell to
itself. loss_l1 treats the expert parameter vector as one block
(||dW|| + |dnu|); loss_l2, for linear experts, splits slope and intercept
(||da|| + |db| + |dnu|).
"""

from __future__ import annotations

import numpy as np

from .density import MixingMeasure

__all__ = ["voronoi_assign", "loss_l1", "loss_l2", "cell_errors", "normalize_mass"]


def _check_pair(fitted: MixingMeasure, truth: MixingMeasure):
    if fitted.kind != truth.kind:
        raise ValueError("fitted and ground-truth measures disagree on expert kind")
    if fitted.d_in != truth.d_in:
        raise ValueError("fitted and ground-truth measures disagree on input dimension")


def _theta(measure: MixingMeasure) -> np.ndarray:
    """(N, p+1) rows of concatenated (expert parameters, variance)."""
    e, nu, _ = measure.arrays()
    return np.column_stack([e, nu])


def voronoi_assign(fitted: MixingMeasure, truth: MixingMeasure) -> list:
    """cells[j] = sorted fitted-atom indices nearest to truth atom j."""
    _check_pair(fitted, truth)
    ti = _theta(fitted)  # (N, q)
    tj = _theta(truth)  # (N*, q)
    dist = np.linalg.norm(ti[:, None, :] - tj[None, :, :], axis=2)
    nearest = dist.argmin(axis=1)  # ties: argmin takes the lowest j
    return [sorted(np.nonzero(nearest == j)[0].tolist())
            for j in range(truth.n_atoms)]


def _loss(fitted: MixingMeasure, truth: MixingMeasure, term) -> float:
    """Shared skeleton; ``term(i, j, power)`` is the parameter-error term for
    fitted atom i against truth atom j at the given power."""
    cells = voronoi_assign(fitted, truth)
    mass = fitted.masses()
    true_mass = truth.masses()
    total = 0.0
    for j, cell in enumerate(cells):
        total += abs(mass[cell].sum() - true_mass[j])
        power = 1 if len(cell) == 1 else 2
        for i in cell:
            total += mass[i] * term(i, j, power)
    return float(total)


def loss_l1(fitted: MixingMeasure, truth: MixingMeasure) -> float:
    """Blockwise loss: ||dW||^p + |dnu|^p per atom (p = 1 on singletons)."""
    _check_pair(fitted, truth)
    ef, nuf, _ = fitted.arrays()
    et, nut, _ = truth.arrays()

    def term(i, j, power):
        dw = np.linalg.norm(ef[i] - et[j])
        dnu = abs(nuf[i] - nut[j])
        return dw**power + dnu**power

    return _loss(fitted, truth, term)


def loss_l2(fitted: MixingMeasure, truth: MixingMeasure) -> float:
    """Linear-expert loss: ||da||^p + |db|^p + |dnu|^p per atom."""
    _check_pair(fitted, truth)
    if fitted.kind != "linear":
        raise ValueError("loss_l2 applies to linear experts")
    ef, nuf, _ = fitted.arrays()
    et, nut, _ = truth.arrays()

    def term(i, j, power):
        da = np.linalg.norm(ef[i, :-1] - et[j, :-1])
        db = abs(ef[i, -1] - et[j, -1])
        dnu = abs(nuf[i] - nut[j])
        return da**power + db**power + dnu**power

    return _loss(fitted, truth, term)


def cell_errors(fitted: MixingMeasure, truth: MixingMeasure):
    """Worst absolute parameter error split by cell size.

    Returns (max_singleton_err, max_multicell_err): for each fitted atom, the
    largest coordinate-wise error of (expert params, nu) against its cell's
    truth atom, maximized over singleton cells and over multi-atom cells
    separately. A side with no cells reports nan.
    """
    cells = voronoi_assign(fitted, truth)
    ti, tj = _theta(fitted), _theta(truth)
    single, multi = [], []
    for j, cell in enumerate(cells):
        for i in cell:
            err = float(np.abs(ti[i] - tj[j]).max())
            (single if len(cell) == 1 else multi).append(err)
    return (max(single) if single else float("nan"),
            max(multi) if multi else float("nan"))


def normalize_mass(fitted: MixingMeasure, truth: MixingMeasure) -> MixingMeasure:
    """Shift every fitted gating bias by one constant so total fitted mass
    matches the truth's. The likelihood only sees gate differences, so c is
    identified up to this shift; fixing the gauge makes the mass-mismatch
    terms of the losses meaningful."""
    from .density import Atom

    shift = float(np.log(truth.masses().sum()) - np.log(fitted.masses().sum()))
    atoms = [Atom(expert=a.expert.copy(), nu=a.nu, c=a.c + shift)
             for a in fitted.atoms]
    return MixingMeasure(kind=fitted.kind, atoms=atoms)
