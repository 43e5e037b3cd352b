"""End-to-end training pipelines, baselines and evaluation metrics."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .bayes import (
    LastLayerModel,
    bbvi_fit,
    decompose_uncertainty,
    hmc_sample,
    mc_dropout_predict,
    posterior_predictive,
)
from .datasets import (
    GmmSpec,
    MoonsSpec,
    apply_standardization,
    augment_with_ood,
    generate_gmm,
    generate_moons,
    inflate_ood,
    load_csv,
    standardize,
    train_test_split,
)
from .errors import BacounError, ShapeError
from .flow import RealNvpFlow, ShellSpec, generate_boundary, outlier_filter, train_flow
from .nn import Mlp, MlpConfig, train_mlp


class StageError(BacounError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


# metrics -------------------------------------------------------------------------

def evaluate_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(probs, labels):
    """Argmax accuracy; ties go to the lower class index."""
    probs = np.atleast_2d(probs)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def class_fit_auc(probs, labels, class_count):
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    labels = np.asarray(labels)
    aucs = [evaluate_auc(probs[:, k], (labels == k).astype(int))
            for k in range(class_count) if 0 < np.sum(labels == k) < len(labels)]
    return float(np.mean(aucs)) if aucs else float("nan")


# models --------------------------------------------------------------------------

@dataclass(frozen=True)
class LastLayerPredictor:
    """Point-estimated feature map with a posterior over the last layer."""

    classifier: Mlp
    posterior: object

    def predict_proba(self, x):
        return posterior_predictive(self.posterior, self.classifier.features(np.atleast_2d(x)))

    def uncertainty(self, x):
        return decompose_uncertainty(self.posterior, self.classifier.features(np.atleast_2d(x)))


@dataclass(frozen=True)
class TrainedBacoun(LastLayerPredictor):
    flow: RealNvpFlow = None
    boundary: np.ndarray = None

    def __post_init__(self):
        fdim = self.classifier.config.feature_dim
        if self.posterior.samples.shape[1] != fdim:
            raise ShapeError(f"posterior rows {self.posterior.samples.shape[1]} != {fdim}")


@dataclass(frozen=True)
class McDropoutPredictor:
    classifier: Mlp
    forward_passes: int
    seed: int

    def _members(self, x):
        # a fixed generator per call keeps predictions reproducible
        return mc_dropout_predict(self.classifier, np.atleast_2d(x), self.forward_passes,
                                  np.random.default_rng(self.seed))

    def predict_proba(self, x):
        return self._members(x).samples.mean(axis=0)

    def uncertainty(self, x):
        return decompose_uncertainty(self._members(x), np.atleast_2d(x))


# stages ------------------------------------------------------------------------------

def make_dataset(config):
    """In-distribution data split into ``(train, test)``; CSV data is standardized on train."""
    ds = config.dataset
    with _stage("gen-data"):
        if ds.kind == "gmm":
            data = generate_gmm(GmmSpec(ds.means, ds.sigma, ds.points_per_cluster),
                                config.stage_rng("data"))
        elif ds.kind == "moons":
            data = generate_moons(MoonsSpec(ds.points_per_class, ds.noise),
                                  config.stage_rng("data"))
        else:
            data = load_csv(ds.csv_path, ds.label_column, ds.positive_classes)
        train, test = train_test_split(data, ds.test_fraction, config.stage_rng("split"))
        if ds.kind == "csv":
            train = standardize(train)
            test = replace(test, x=apply_standardization(test.x, train.mean, train.std),
                           mean=train.mean, std=train.std)
    return train, test


def fit_flow(config, x):
    fc = config.flow
    with _stage("train-flow"):
        flow = RealNvpFlow.init(x.shape[1], n_layers=fc.n_layers, hidden_dims=fc.hidden_dims,
                                rng=config.stage_rng("flow-init"), data=x)
        flow, history = train_flow(flow, x, epochs=fc.epochs, batch_size=fc.batch_size,
                                   learning_rate=fc.learning_rate, l2=fc.l2,
                                   seed=config.stage_rng("flow-train"))
    return flow, history


def make_boundary(config, flow, n=None, stream="boundary"):
    sc = config.shell
    n = sc.n_points if n is None else n
    with _stage("gen-boundary"):
        if n <= 0:
            raise ValueError("boundary generation needs at least one point")
        return generate_boundary(flow, ShellSpec(sc.inner_radius, sc.outer_radius), n,
                                 config.stage_rng(stream))


def fit_classifier(config, data, *, hidden_dims=None, dropout_rate=None, l2=None,
                   stream="classifier"):
    """Train a deterministic MLP with ``data.class_count`` outputs."""
    cc = config.classifier
    cfg = MlpConfig(
        data.dim,
        cc.hidden_dims if hidden_dims is None else hidden_dims,
        data.class_count,
        leaky_slope=cc.leaky_slope,
        dropout_rate=cc.dropout_rate if dropout_rate is None else dropout_rate,
        l2_penalty=cc.l2 if l2 is None else l2,
    )
    with _stage("train-classifier"):
        mlp = Mlp.init(cfg, config.stage_rng(stream + "-init"))
        mlp, history = train_mlp(mlp, data, epochs=cc.epochs, batch_size=cc.batch_size,
                                 learning_rate=cc.learning_rate,
                                 seed=config.stage_rng(stream + "-train"))
    return mlp, history


def fit_posterior(config, mlp, data, stream="posterior"):
    """Bayesian logistic regression on the frozen, bias-augmented features of ``mlp``."""
    ic = config.inference
    with _stage("infer"):
        model = LastLayerModel(mlp.features(data.x), data.y, data.class_count, ic.prior_std)
        rng = config.stage_rng(stream)
        if ic.method == "hmc":
            seed = int(rng.integers(2**63))
            samples = hmc_sample(model, config.hmc.to_hmc(seed), initial=mlp.last_layer())
            return samples.thin(ic.posterior_samples)
        res = bbvi_fit(model, iterations=ic.vi_iterations, learning_rate=ic.vi_learning_rate,
                       mc_samples=ic.vi_mc_samples, seed=rng, n_draws=ic.posterior_samples,
                       init_mu=mlp.last_layer())
        return res.samples


def train_bacoun(config, train):
    """Flow on ``train.x``, boundary points as class K, K+1 classifier, Bayesian last layer."""
    flow, _ = fit_flow(config, train.x)
    boundary = make_boundary(config, flow)
    augmented = augment_with_ood(train, boundary)
    mlp, _ = fit_classifier(config, augmented)
    posterior = fit_posterior(config, mlp, augmented)
    return TrainedBacoun(mlp, posterior, flow, boundary)


def train_nlm_baseline(config, train):
    mlp, _ = fit_classifier(config, train, stream="nlm")
    return LastLayerPredictor(mlp, fit_posterior(config, mlp, train, stream="nlm-posterior"))


def train_mc_dropout(config, train):
    bc = config.baselines
    mlp, _ = fit_classifier(config, train, hidden_dims=bc.mcd_hidden_dims,
                            dropout_rate=bc.mcd_dropout_rate, l2=bc.mcd_l2, stream="mcd")
    return McDropoutPredictor(mlp, bc.mcd_forward_passes, _seed_of(config, "mcd-predict"))


def _seed_of(config, stream):
    return int(config.stage_rng(stream).integers(2**63))


# regions and reports ----------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    x: np.ndarray
    labels: np.ndarray = None


def _ball(center, radius, n, rng):
    d = len(center)
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return np.asarray(center) + u * r[:, None]


def out_grid(low, high, resolution, dim=2):
    if dim != 2:
        raise ValueError(f"grid regions are 2-D only, got dimension {dim}")
    g = np.linspace(low, high, resolution)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def make_regions(config, test):
    """In / Middle / Out point sets. In and Middle need cluster means (GMM data)."""
    rc = config.regions
    rng = config.stage_rng("regions")
    regions = {}
    if config.dataset.kind == "gmm":
        means = np.asarray(config.dataset.means, dtype=np.float64)
        k = len(means)
        labels = np.arange(rc.in_count) % k
        pts = np.vstack([_ball(means[c], rc.in_radius, 1, rng) for c in labels])
        regions["In"] = Region(pts, labels)
        regions["Middle"] = Region(_ball(means.mean(axis=0), rc.middle_radius,
                                         rc.middle_count, rng))
    else:
        idx = rng.choice(test.n, size=min(rc.in_count, test.n), replace=False)
        regions["In"] = Region(test.x[np.sort(idx)], test.y[np.sort(idx)])
    if test.dim == 2:
        regions["Out"] = Region(out_grid(rc.out_low, rc.out_high, rc.out_resolution))
    else:
        d = config.dataset
        regions["Out"] = Region(inflate_ood(test, d.ood_dim, d.ood_mean, d.ood_std,
                                            rc.in_count, rng))
    return regions


@dataclass(frozen=True)
class RegionReport:
    aleatoric: dict
    epistemic: dict
    accuracy: float
    in_region_accuracy: float = float("nan")
    extra: dict = field(default_factory=dict)

    def ratio(self, kind, num, den):
        table = getattr(self, kind)
        return table[num] / table[den] if table[den] > 0 else float("inf")

    def to_dict(self):
        return {"aleatoric": dict(self.aleatoric), "epistemic": dict(self.epistemic),
                "accuracy": self.accuracy, "in_region_accuracy": self.in_region_accuracy,
                **self.extra}


def region_report(model, regions, test):
    """Mean aleatoric / epistemic per region; accuracy is measured on ``test``."""
    ale, epi = {}, {}
    for name, region in regions.items():
        if len(region.x) == 0:
            raise ValueError(f"region {name!r} is empty")
        rep = model.uncertainty(region.x)
        ale[name] = float(np.mean(rep.aleatoric))
        epi[name] = float(np.mean(rep.epistemic))
    acc = accuracy(model.predict_proba(test.x), test.y)
    in_acc = float("nan")
    if "In" in regions and regions["In"].labels is not None:
        in_acc = accuracy(model.predict_proba(regions["In"].x), regions["In"].labels)
    return RegionReport(ale, epi, acc, in_acc)


def entropy_grid(model, low, high, resolution):
    """Rows ``(x0, x1, total, aleatoric, epistemic)`` over a grid, x0 outermost."""
    low = np.atleast_1d(np.asarray(low, dtype=np.float64))
    high = np.atleast_1d(np.asarray(high, dtype=np.float64))
    if len(low) != 2 or len(high) != 2:
        raise ValueError(f"entropy grids are 2-D only, got dimension {len(low)}")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    a, b = np.meshgrid(np.linspace(low[0], high[0], resolution),
                       np.linspace(low[1], high[1], resolution), indexing="ij")
    pts = np.column_stack([a.ravel(), b.ravel()])
    rep = model.uncertainty(pts)
    return np.column_stack([pts, rep.total, rep.aleatoric, rep.epistemic])


def ood_auc(model, in_x, ood_x):
    """AUC of epistemic uncertainty for telling ``ood_x`` (1) from ``in_x`` (0)."""
    scores = np.concatenate([model.uncertainty(in_x).epistemic,
                             model.uncertainty(ood_x).epistemic])
    labels = np.concatenate([np.zeros(len(in_x), int), np.ones(len(ood_x), int)])
    return evaluate_auc(scores, labels)


def tabular_report(model, in_x, ood_x):
    """Mean uncertainties on in-distribution and OOD points, with the relative change."""
    r_in = model.uncertainty(in_x)
    r_out = model.uncertainty(ood_x)
    e_in = float(np.mean(r_in.epistemic))
    e_out = float(np.mean(r_out.epistemic))
    return {
        "aleatoric_in": float(np.mean(r_in.aleatoric)),
        "aleatoric_ood": float(np.mean(r_out.aleatoric)),
        "epistemic_in": e_in,
        "epistemic_ood": e_out,
        "epistemic_pct_change": 100.0 * (e_out - e_in) / e_in if e_in > 0 else float("inf"),
    }


# pathology -------------------------------------------------------------------------------

def fit_logistic(phi, b, ridge):
    """Binary logistic regression on fixed features: mean log loss + ridge * |w|^2."""
    phi = np.asarray(phi, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = len(b)

    def objective(w):
        z = phi @ w
        loss = -np.sum(b * log_expit(z) + (1 - b) * log_expit(-z)) / n + ridge * w @ w
        grad = phi.T @ (expit(z) - b) / n + 2 * ridge * w
        return loss, grad

    res = minimize(objective, np.zeros(phi.shape[1]), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000})
    return res.x


def pathology_experiment(config, train, test, nlm_classifier, joint_classifier, flow):
    """Can a linear model on frozen features tell boundary points from data?

    Features come from a K-class network (``nlm_classifier``) and from the K+1-class
    network (``joint_classifier``). Both regressors see the same training set and are
    scored on the test split plus fresh boundary points.
    """
    pc = config.pathology
    with _stage("pathology"):
        train_b = make_boundary(config, flow)
        test_b = make_boundary(config, flow, pc.heldout_boundary, stream="pathology-boundary")
        x_fit = np.vstack([train.x, train_b])
        b_fit = np.concatenate([np.zeros(train.n), np.ones(len(train_b))])
        x_eval = np.vstack([test.x, test_b])
        b_eval = np.concatenate([np.zeros(test.n, int), np.ones(len(test_b), int)])
        # control: b permuted on both sides, so no input carries information about it
        shuffle_rng = config.stage_rng("pathology-shuffle")
        b_fit_sh = shuffle_rng.permutation(b_fit)
        b_eval_sh = shuffle_rng.permutation(b_eval)
        out = {}
        for name, mlp in (("nlm", nlm_classifier), ("joint", joint_classifier)):
            phi_fit = mlp.features(x_fit)
            phi_eval = mlp.features(x_eval)
            w = fit_logistic(phi_fit, b_fit, pc.ridge)
            out[f"{name}_feature_ood_auc"] = evaluate_auc(phi_eval @ w, b_eval)
            w0 = fit_logistic(phi_fit, b_fit_sh, pc.ridge)
            out[f"shuffled_{name}_feature_ood_auc"] = evaluate_auc(phi_eval @ w0, b_eval_sh)
    return out


# outliers ----------------------------------------------------------------------------------

def outlier_experiment(config):
    """Inject noisy copies into moons data, fit a flow on everything, drop the k least likely."""
    oc = config.outliers
    ds = config.dataset
    with _stage("outliers"):
        rng = config.stage_rng("outliers")
        data = generate_moons(MoonsSpec(ds.points_per_class, ds.noise), rng)
        src = rng.integers(0, data.n, size=oc.n_outliers)
        noisy = data.x[src] + oc.noise * rng.standard_normal((oc.n_outliers, data.dim))
        x = np.vstack([data.x, noisy])
        flow = RealNvpFlow.init(2, n_layers=config.flow.n_layers,
                                hidden_dims=config.flow.hidden_dims,
                                rng=config.stage_rng("outliers-flow-init"), data=x)
        flow, _ = train_flow(flow, x, epochs=oc.flow_epochs, batch_size=config.flow.batch_size,
                             learning_rate=config.flow.learning_rate, l2=oc.flow_l2,
                             seed=config.stage_rng("outliers-flow-train"))
        split = outlier_filter(flow, x, oc.k)
    hits = int(np.sum(split.removed >= data.n))
    return {
        "n_inliers": int(data.n),
        "n_outliers": int(oc.n_outliers),
        "k": int(oc.k),
        "removed_injected": hits,
        "precision": hits / oc.k if oc.k else float("nan"),
        "recall": hits / oc.n_outliers if oc.n_outliers else float("nan"),
        "removed": split.removed.tolist(),
    }
