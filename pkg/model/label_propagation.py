import torch

from utils.linalg import DEFAULT_CG_TOL, LinearOperator, conjugate_gradient
from utils.utility import observed_targets


def label_propagation(graph, y, mask, tol=DEFAULT_CG_TOL, max_iter=None):
    '''
    Harmonic interpolation: every unobserved node ends up at the weighted mean
    of its neighbours. Solves L_UU x_U = A_UO y_O, the graph Laplacian
    restricted to unobserved nodes, which is SPD for a connected graph with at
    least one observed node. Observed values pass through.
    Returns (prediction, report).
    '''
    unobserved = mask.unobserved
    n_unobserved = int(unobserved.sum())
    prediction = observed_targets(y, mask).clone()
    if n_unobserved == 0:
        return prediction, None

    def laplacian_block(v):
        full = torch.zeros((graph.n_nodes, *v.shape[1:]), dtype=torch.float64)
        full[unobserved] = v
        return (graph.degrees.view(-1, *([1] * (v.dim() - 1))) * full - graph.adjacency_apply(full))[unobserved]

    rhs = graph.adjacency_apply(prediction)[unobserved]
    with torch.no_grad():
        solution, report = conjugate_gradient(LinearOperator(n_unobserved, laplacian_block), rhs,
                                              tol=tol, max_iter=max_iter)
    prediction[unobserved] = solution
    return prediction, report
