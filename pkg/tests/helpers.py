import numpy as np

from protoxct.head import SEMANTIC_TYPES, Anchor, AnchorSet, init_prototypes
from protoxct.numerics import make_rng


def random_anchorset(seed=0, dim=8, spread=0.3, per_type=6):
    """Six anchors per type around well separated type centres; defect types are half edge."""
    rng = make_rng(seed)
    centres = rng.normal(0.0, 2.0, (len(SEMANTIC_TYPES), dim))
    anchors, rid = {}, 0
    for k, t in enumerate(SEMANTIC_TYPES):
        lst = []
        for j in range(per_type):
            lst.append(Anchor(rid, centres[k] + spread * rng.normal(size=dim), edge=k >= 3 and j < per_type // 2))
            rid += 1
        anchors[t] = lst
    return AnchorSet(anchors, per_type=per_type)


def random_model(seed=0, dim=8, tau=1.0):
    return init_prototypes(random_anchorset(seed, dim), tau)


def batch_near(model, n, seed=0, noise=0.5):
    """Records scattered around the prototypes, labelled by their prototype's class."""
    rng = make_rng(seed)
    k = np.arange(n) % model.n_prototypes
    Z = model.prototypes[k] + noise * rng.normal(size=(n, model.dim))
    return Z, model.class_index[k]
