import logging
import zlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch

from utils.errors import CapacityError, DimensionError, NumericError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_CG_TOL = 1e-7
DEFAULT_EIGEN_CAP = 20000


@dataclass(frozen=True)
class LinearOperator:
    '''
    Matrix-free square operator. conjugate_gradient always calls apply with an
    (n, k) block, so per-node scalings must broadcast over the trailing axis.
    '''
    dimension: int
    apply: object

    def __call__(self, v):
        if v.shape[0] != self.dimension:
            raise DimensionError(f'operator of dimension {self.dimension} applied to length {v.shape[0]}')
        return self.apply(v)


@dataclass(frozen=True)
class CgReport:
    iterations: int
    final_residual_norm: float
    converged: bool


def conjugate_gradient(op, rhs, tol=DEFAULT_CG_TOL, max_iter=None, x0=None, preconditioner=None):
    '''
    Solves op(x) = rhs for symmetric positive definite op.

    rhs may hold several right-hand sides as columns, they are iterated
    together and each stops once ||op(x) - rhs|| <= tol * ||rhs||. The report
    carries the largest relative residual over the columns. When max_iter is
    exhausted the iterate with the lowest residual is returned and the report is
    flagged as not converged.

    preconditioner, if given, applies an approximation of op^-1 (e.g. Jacobi).
    '''
    if tol <= 0:
        raise ValidationError(f'CG tolerance must be positive, got {tol}')
    squeeze = rhs.dim() == 1
    b = rhs.unsqueeze(1) if squeeze else rhs
    n = b.shape[0]
    max_iter = 2 * n if max_iter is None else max_iter
    precondition = preconditioner if preconditioner is not None else (lambda v: v)

    if x0 is None:
        x = torch.zeros_like(b)
        r = b.clone()
    else:
        x = (x0.unsqueeze(1) if x0.dim() == 1 else x0).expand_as(b).clone()
        r = b - op(x)

    b_norm = torch.linalg.norm(b, dim=0)
    threshold = tol * b_norm
    residual = torch.linalg.norm(r, dim=0)
    done = residual <= threshold
    best_x, best_residual = x.clone(), residual.clone()

    z = precondition(r)
    p = z.clone()
    rz = (r * z).sum(0)
    iterations = 0
    while not bool(done.all()) and iterations < max_iter:
        Ap = op(p)
        alpha = torch.where(done, torch.zeros_like(rz), rz / (p * Ap).sum(0))
        x = x + alpha * p
        r = r - alpha * Ap
        residual = torch.linalg.norm(r, dim=0)
        iterations += 1
        if not bool(torch.isfinite(residual).all()):
            raise NumericError(f'non-finite CG residual at iteration {iterations}', term='conjugate_gradient')

        improved = residual < best_residual
        best_x = torch.where(improved, x, best_x)
        best_residual = torch.where(improved, residual, best_residual)

        done = done | (residual <= threshold)
        z = precondition(r)
        rz_new = (r * z).sum(0)
        beta = torch.where(done, torch.zeros_like(rz), rz_new / rz)
        p = z + beta * p
        rz = rz_new

    relative = torch.where(b_norm > 0, best_residual / b_norm, torch.zeros_like(b_norm))
    report = CgReport(iterations=iterations, final_residual_norm=float(relative.max()), converged=bool(done.all()))
    if report.converged:
        logger.debug('CG converged in %d iterations, relative residual %.3e', iterations, report.final_residual_norm)
    else:
        logger.warning('CG did not converge in %d iterations, relative residual %.3e',
                       iterations, report.final_residual_norm)
    return (best_x.squeeze(1) if squeeze else best_x), report


def jacobi_preconditioner(diagonal):
    inverse = 1.0 / diagonal

    def apply(v):
        return inverse.view(-1, *([1] * (v.dim() - 1))) * v

    return apply


def symmetric_eigenvalues(graph, cap=DEFAULT_EIGEN_CAP):
    '''
    Eigenvalues of D^-1 A, ascending. They are computed from the similar
    symmetric matrix D^-1/2 A D^-1/2 with a dense LAPACK solver.
    '''
    if graph.n_nodes > cap:
        raise CapacityError(f'dense eigendecomposition of {graph.n_nodes} nodes exceeds the cap of {cap}, '
                            f'use the power series log-determinant backend')
    scale = sp.diags(graph.degree_power(-0.5).numpy())
    normalized = (scale @ graph.to_scipy() @ scale).toarray()
    eigenvalues = np.linalg.eigvalsh(normalized)
    return torch.as_tensor(np.clip(eigenvalues, -1.0, 1.0), dtype=torch.float64)


def derive_seed(seed, stream):
    ''' Seed of a named sub-stream, independent of the order streams are created in. '''
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(stream.encode()),))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_generator(seed, stream='default'):
    generator = torch.Generator()
    if seed is None:
        generator.seed()
    else:
        generator.manual_seed(derive_seed(seed, stream))
    return generator


def _shape(shape):
    return (shape,) if isinstance(shape, int) else tuple(shape)


def rng_standard_normal(shape, seed=None, stream='default', generator=None):
    generator = make_generator(seed, stream) if generator is None else generator
    return torch.randn(_shape(shape), generator=generator, dtype=torch.float64)


def rng_rademacher(shape, seed=None, stream='default', generator=None):
    generator = make_generator(seed, stream) if generator is None else generator
    return torch.randint(0, 2, _shape(shape), generator=generator).to(torch.float64) * 2.0 - 1.0


def set_deterministic(deterministic=True):
    ''' Single-threaded, deterministic kernels for bit-reproducible runs. '''
    if deterministic:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(deterministic)
