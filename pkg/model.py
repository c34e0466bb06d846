"""
CaVINet model: two modality branches, the shared/specific projection block,
the verification head and the two identification heads
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from architectures import BranchProfileConfig
from config import normalize_weights
from numerics import (
    EVAL, TRAIN, Affine, Conv2D, Dropout, LabelError, MaxPool2D, ReLU, ShapeError, Sigmoid, Softmax,
    binary_cross_entropy, nll_loss,
)
from seeding import derive_rng

logger = logging.getLogger(__name__)

CARICATURE = 'caricature'
VISUAL = 'visual'
MODALITIES = (CARICATURE, VISUAL)

# Recorded in every checkpoint so features are always rebuilt in the same order
CONCAT_ORDER = {'verification': ['F_c', 'F_v'], 'identification': ['F', 'G']}

INTERPRETATIONS = (
    'full-binary-cross-entropy',
    'negative-log-likelihood-identification',
    'subspace-dimensions',
    'projection-on-flattened-features',
    'head-widths',
    'shared-multiplier',
    'normalized-loss-weights',
    'verification-threshold',
    'he-initialization',
    'concatenation-order',
    'dropout-inside-heads-only',
    'visual-features-mode',
)


@dataclass
class PairLabels:
    y_ve: int
    y_ci: int
    y_vi: int

    def __post_init__(self):
        if int(self.y_ve) != int(self.y_ci == self.y_vi):
            raise LabelError(f"y_ve={self.y_ve} inconsistent with identities {self.y_ci}/{self.y_vi}")


@dataclass
class LossBreakdown:
    l_ve: float
    l_ci: float
    l_vi: float
    l_ortho: float
    total: float
    alpha: float
    beta: float
    gamma: float
    penalty_c: float = 0.0
    penalty_v: float = 0.0

    def recompute_total(self):
        return self.alpha * self.l_ve + self.beta * self.l_ci + self.gamma * self.l_vi + self.l_ortho

    def to_dict(self):
        return {
            'l_ve': self.l_ve, 'l_ci': self.l_ci, 'l_vi': self.l_vi, 'l_ortho': self.l_ortho,
            'total': self.total, 'alpha': self.alpha, 'beta': self.beta, 'gamma': self.gamma,
        }


@dataclass
class ForwardState:
    """Intermediates recorded by a forward pass for the matching backward"""
    n: int
    x_c: np.ndarray
    x_v: np.ndarray
    x_cv: np.ndarray = None
    outputs: dict = field(default_factory=dict)


class ModalityBranch:
    """Conv/relu/pool stack of one modality; output flattened to a feature vector"""

    def __init__(self, layers, input_shape, freeze_depth=0, name='branch'):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.conv_layers = [layer for layer in self.layers if layer.kind == 'conv2d']
        if not 0 <= freeze_depth <= len(self.conv_layers):
            raise ValueError(f"freeze_depth {freeze_depth} outside [0, {len(self.conv_layers)}] for {name}")
        self.freeze_depth = freeze_depth
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self.feature_dim = int(np.prod(shape))

    @classmethod
    def from_profile(cls, profile_name, input_shape=None, freeze_depth=0, rng=None, dtype=np.float64, name='branch'):
        profile = BranchProfileConfig.get_profile(profile_name)
        input_shape = tuple(input_shape or profile['input_shape'])
        channels = input_shape[0]
        layers = []
        for block in profile['blocks']:
            for width in block:
                layers.append(Conv2D(channels, width, profile['kernel_size'], padding=profile['padding'],
                                     rng=rng, dtype=dtype))
                layers.append(ReLU())
                channels = width
            layers.append(MaxPool2D(profile['pool']))
        return cls(layers, input_shape, freeze_depth=freeze_depth, name=name)

    def shadow(self, name=None):
        """A second set of kernels over the same parameter arrays (separate caches)"""
        layers = []
        for layer in self.layers:
            if layer.kind == 'conv2d':
                clone = Conv2D(layer.in_channels, layer.out_channels, layer.kernel_size, layer.stride,
                               layer.padding, dtype=layer.params[0].dtype, init='zeros')
                layers.append(clone.share_params_from(layer))
            elif layer.kind == 'maxpool2d':
                layers.append(MaxPool2D(layer.size, layer.stride))
            else:
                layers.append(type(layer)())
        return ModalityBranch(layers, self.input_shape, self.freeze_depth, name=name or self.name)

    def named_parameters(self, prefix=None):
        prefix = prefix or self.name
        named = []
        for i, conv in enumerate(self.conv_layers):
            named.append((f"{prefix}.conv{i}.weight", conv.params[0]))
            named.append((f"{prefix}.conv{i}.bias", conv.params[1]))
        return named

    def frozen_names(self, prefix=None):
        prefix = prefix or self.name
        names = []
        for i in range(self.freeze_depth):
            names += [f"{prefix}.conv{i}.weight", f"{prefix}.conv{i}.bias"]
        return names

    def forward(self, images, mode=EVAL, rng=None):
        if images.ndim != 4 or tuple(images.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name} input", ('N',) + self.input_shape, tuple(images.shape))
        x = images
        for layer in self.layers:
            x = layer.forward(x, mode=mode, rng=rng)
        return x.reshape(images.shape[0], -1)

    def backward(self, grad_features, rectify=False, hook=None):
        """
        Backpropagate a feature gradient to the input images

        Returns (grad_images, grads) where grads maps parameter names to gradients;
        frozen layers get zeros. With rectify=True every intermediate gradient is
        clamped at zero before flowing further back.
        """
        g = grad_features.reshape((grad_features.shape[0],) + tuple(self.output_shape))
        if rectify:
            g = np.maximum(g, 0)
        if hook:
            hook(f"{self.name}.features", g)
        conv_grads = {}
        conv_index = len(self.conv_layers)
        for position in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[position]
            g, param_grads = layer.backward(g)
            if layer.kind == 'conv2d':
                conv_index -= 1
                conv_grads[conv_index] = param_grads
            if rectify:
                g = np.maximum(g, 0)
            if hook:
                hook(f"{self.name}.{position}.{layer.kind}", g)

        grads = {}
        for i, conv in enumerate(self.conv_layers):
            gw, gb = conv_grads[i]
            if i < self.freeze_depth:
                gw, gb = np.zeros_like(conv.params[0]), np.zeros_like(conv.params[1])
            grads[i] = (gw, gb)
        return g, grads

    def clear(self):
        for layer in self.layers:
            layer.clear()


class ProjectionBlock:
    """Shared transform S (d x k) and specific transforms S_c, S_v (d x m)"""

    def __init__(self, d, k, m, lambda_c=0.0, lambda_v=0.0, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        if lambda_c < 0 or lambda_v < 0:
            raise ValueError("orthogonality multipliers must be >= 0")
        scale = np.sqrt(1.0 / d)
        self.S = (rng.standard_normal((d, k)) * scale).astype(dtype)
        self.S_c = (rng.standard_normal((d, m)) * scale).astype(dtype)
        self.S_v = (rng.standard_normal((d, m)) * scale).astype(dtype)
        self.lambda_c = float(lambda_c)
        self.lambda_v = float(lambda_v)

    @classmethod
    def from_matrices(cls, S, S_c, S_v, lambda_c=0.0, lambda_v=0.0):
        block = cls.__new__(cls)
        block.S, block.S_c, block.S_v = S, S_c, S_v
        block.lambda_c, block.lambda_v = float(lambda_c), float(lambda_v)
        return block

    @property
    def d(self):
        return self.S.shape[0]

    @property
    def k(self):
        return self.S.shape[1]

    @property
    def m(self):
        return self.S_c.shape[1]

    def project(self, x_c, x_v):
        """F_c = S^T x_c, G_c = S_c^T x_c, F_v = S^T x_v, G_v = S_v^T x_v (batched rows or single vectors)"""
        for name, x in (('x_c', x_c), ('x_v', x_v)):
            if x.shape[-1] != self.d:
                raise ShapeError(f"projection {name}", (self.d,), tuple(x.shape))
        return x_c @ self.S, x_c @ self.S_c, x_v @ self.S, x_v @ self.S_v

    def penalty_terms(self):
        """(||S_c^T S||_F^2, ||S_v^T S||_F^2) in double precision"""
        S = self.S.astype(np.float64)
        pc = float(np.sum((self.S_c.astype(np.float64).T @ S) ** 2))
        pv = float(np.sum((self.S_v.astype(np.float64).T @ S) ** 2))
        return pc, pv

    def ortho_penalty(self):
        pc, pv = self.penalty_terms()
        return self.lambda_c * pc + self.lambda_v * pv

    def penalty_gradients(self):
        """Gradients of the penalty wrt S, S_c, S_v"""
        S = self.S.astype(np.float64)
        S_c = self.S_c.astype(np.float64)
        S_v = self.S_v.astype(np.float64)
        grad_S = 2.0 * self.lambda_c * S_c @ (S_c.T @ S) + 2.0 * self.lambda_v * S_v @ (S_v.T @ S)
        grad_S_c = 2.0 * self.lambda_c * S @ (S.T @ S_c)
        grad_S_v = 2.0 * self.lambda_v * S @ (S.T @ S_v)
        return grad_S, grad_S_c, grad_S_v

    def named_parameters(self):
        return [('projection.S', self.S), ('projection.S_c', self.S_c), ('projection.S_v', self.S_v)]


def project(block, x_c, x_v):
    return block.project(x_c, x_v)


def ortho_penalty(block):
    return block.ortho_penalty()


class MLPHead:
    """3 affine layers with relu+dropout between them, ending in sigmoid or softmax"""

    def __init__(self, in_dim, widths, out_dim, output='softmax', dropout_p=0.0, rng=None,
                 dtype=np.float64, name='head', final_init='he'):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        dims = [in_dim] + list(widths)
        self.layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            self.layers += [Affine(a, b, rng=rng, dtype=dtype), ReLU(), Dropout(dropout_p)]
        self.layers.append(Affine(dims[-1], out_dim, rng=rng, dtype=dtype, init=final_init))
        self.output = Sigmoid() if output == 'sigmoid' else Softmax()
        self.affines = [layer for layer in self.layers if layer.kind == 'affine']

    def forward(self, x, mode=EVAL, rng=None, logits_only=False):
        for layer in self.layers:
            x = layer.forward(x, mode=mode, rng=rng)
        if logits_only:
            return x
        return self.output.forward(x, mode=mode)

    def backward(self, grad_out, from_logits=False):
        g = grad_out if from_logits else self.output.backward(grad_out)[0]
        affine_grads = []
        for layer in reversed(self.layers):
            g, param_grads = layer.backward(g)
            if layer.kind == 'affine':
                affine_grads.append(param_grads)
        affine_grads.reverse()
        return g, affine_grads

    def zero_grads(self):
        return [[np.zeros_like(p) for p in affine.params] for affine in self.affines]

    def named_parameters(self):
        named = []
        for i, affine in enumerate(self.affines):
            named.append((f"{self.name}.fc{i}.weight", affine.params[0]))
            named.append((f"{self.name}.fc{i}.bias", affine.params[1]))
        return named


class CaVINet:
    """
    Coupled caricature/visual network
    Verification consumes [F_c || F_v]; identification consumes [F || G] per modality
    (or [F] alone in shared_only mode)
    """

    def __init__(self, model_config, train_config, n_identities, seed=0):
        self.model_config = dict(model_config)
        self.train_config = dict(train_config)
        self.n_identities = int(n_identities)
        self.seed = int(seed)
        self.dtype = np.dtype(model_config.get('dtype', 'float64'))

        profile = model_config.get('profile', 'toy')
        input_shape = tuple(model_config.get('input_shape') or BranchProfileConfig.get_profile(profile)['input_shape'])
        freeze_depth = int(train_config.get('freeze_depth', 0))
        self.tied_weights = bool(train_config.get('tied_weights', False))
        self.feature_mode = train_config.get('feature_mode', 'shared_plus_specific')
        self.verification_only = bool(train_config.get('verification_only', False))

        self.branch_c = ModalityBranch.from_profile(profile, input_shape, freeze_depth,
                                                    rng=derive_rng(seed, 'model', 'branch_c'),
                                                    dtype=self.dtype, name='branch_c')
        if self.tied_weights:
            self.branch_c.name = 'branch'
            self.branch_v = self.branch_c.shadow(name='branch')
        else:
            self.branch_v = ModalityBranch.from_profile(profile, input_shape, freeze_depth,
                                                        rng=derive_rng(seed, 'model', 'branch_v'),
                                                        dtype=self.dtype, name='branch_v')
        # caricature images through the visual branch, used by visual_features_only
        self.branch_cv = self.branch_v.shadow() if self.feature_mode == 'visual_features_only' else None

        d = self.branch_c.feature_dim
        k = int(model_config.get('shared_dim', 256))
        m = int(model_config.get('specific_dim', 256))
        lam = float(train_config.get('lambda', 0.2))
        self.block = ProjectionBlock(d, k, m, lam, lam, rng=derive_rng(seed, 'model', 'projection'), dtype=self.dtype)

        dropout_p = float(train_config.get('dropout_p', 0.0))
        id_in = k if self.feature_mode == 'shared_only' else k + m
        self.ver_head = MLPHead(2 * k, model_config.get('ver_head_widths', [512, 128]), 1, 'sigmoid', dropout_p,
                                rng=derive_rng(seed, 'model', 'ver_head'), dtype=self.dtype, name='ver_head')
        self.cari_head = MLPHead(id_in, model_config.get('id_head_widths', [512, 128]), self.n_identities,
                                 'softmax', dropout_p, rng=derive_rng(seed, 'model', 'cari_head'),
                                 dtype=self.dtype, name='cari_head')
        self.visual_head = MLPHead(id_in, model_config.get('id_head_widths', [512, 128]), self.n_identities,
                                   'softmax', dropout_p, rng=derive_rng(seed, 'model', 'visual_head'),
                                   dtype=self.dtype, name='visual_head')

        weights = (1, 0, 0) if self.verification_only else train_config.get('weights', (55, 30, 15))
        self.alpha, self.beta, self.gamma = normalize_weights(weights)
        self._state = None

        logger.debug(f"CaVINet built: {BranchProfileConfig.get_profile(profile)['display_name']} "
                     f"d={d} k={k} m={m} ids={self.n_identities} "
                     f"tied={self.tied_weights} mode={self.feature_mode}")

    # Parameters

    def named_parameters(self):
        """Ordered (name, array) pairs; tied branches are listed once"""
        named = list(self.branch_c.named_parameters())
        if not self.tied_weights:
            named += self.branch_v.named_parameters()
        named += self.block.named_parameters()
        for head in (self.ver_head, self.cari_head, self.visual_head):
            named += head.named_parameters()
        return named

    def parameter_dict(self):
        return dict(self.named_parameters())

    def frozen_names(self):
        names = set(self.branch_c.frozen_names())
        if not self.tied_weights:
            names.update(self.branch_v.frozen_names())
        return names

    def get_state(self):
        return {name: array.copy() for name, array in self.named_parameters()}

    def load_state(self, state):
        params = self.parameter_dict()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"State mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, target in params.items():
            source = state[name]
            if source.shape != target.shape:
                raise ShapeError(f"parameter {name}", target.shape, source.shape)
            target[...] = source

    def branches_identical(self):
        """True when both branches hold bit-identical parameters"""
        pairs = zip(self.branch_c.named_parameters(), self.branch_v.named_parameters())
        return all(np.array_equal(a, b) for (_, a), (_, b) in pairs)

    def describe(self):
        """Config block stored alongside checkpoints"""
        return {
            'model': self.model_config,
            'train': self.train_config,
            'n_identities': self.n_identities,
            'seed': self.seed,
            'concat_order': CONCAT_ORDER,
        }

    # Forward

    def _check_pair_shapes(self, cari, vis):
        if cari.shape != vis.shape:
            raise ShapeError('cross-modal pair images', tuple(cari.shape), tuple(vis.shape))

    def _id_input(self, F, G):
        if self.feature_mode == 'shared_only':
            return F
        return np.concatenate([F, G], axis=1)

    def forward(self, cari, vis, mode=EVAL, rng=None):
        """Full forward pass; returns {'o_ve', 'p_ci', 'p_vi'} and records intermediates"""
        self._check_pair_shapes(cari, vis)
        cari = cari.astype(self.dtype, copy=False)
        vis = vis.astype(self.dtype, copy=False)
        # Branch features, then the shared and specific projections
        x_c = self.branch_c.forward(cari, mode=mode, rng=rng)
        x_v = self.branch_v.forward(vis, mode=mode, rng=rng)
        F_c, G_c, F_v, G_v = self.block.project(x_c, x_v)

        state = ForwardState(n=cari.shape[0], x_c=x_c, x_v=x_v)
        # Verification sees only the shared features of both modalities
        o_ve = self.ver_head.forward(np.concatenate([F_c, F_v], axis=1), mode=mode, rng=rng)[:, 0]
        if self.feature_mode == 'visual_features_only':
            x_cv = self.branch_cv.forward(cari, mode=mode, rng=rng)
            state.x_cv = x_cv
            p_ci = self.cari_head.forward(self._id_input(x_cv @ self.block.S, x_cv @ self.block.S_v), mode=mode, rng=rng)
        else:
            p_ci = self.cari_head.forward(self._id_input(F_c, G_c), mode=mode, rng=rng)
        p_vi = self.visual_head.forward(self._id_input(F_v, G_v), mode=mode, rng=rng)

        state.outputs = {'o_ve': o_ve, 'p_ci': p_ci, 'p_vi': p_vi}
        self._state = state
        return state.outputs

    def predict(self, cari, vis):
        """Eval-mode outputs (o_ve, p_ci, p_vi) for a batch of pairs"""
        outputs = self.forward(cari, vis, mode=EVAL)
        return outputs['o_ve'], outputs['p_ci'], outputs['p_vi']

    def verify(self, cari, vis):
        """Verification scores only; identification heads are never consulted"""
        self._check_pair_shapes(cari, vis)
        x_c = self.branch_c.forward(cari.astype(self.dtype, copy=False), mode=EVAL)
        x_v = self.branch_v.forward(vis.astype(self.dtype, copy=False), mode=EVAL)
        return self.ver_head.forward(np.concatenate([x_c @ self.block.S, x_v @ self.block.S], axis=1), mode=EVAL)[:, 0]

    def _identification_path(self, modality):
        if modality == CARICATURE:
            if self.feature_mode == 'visual_features_only':
                return self.branch_cv, self.block.S_v, self.cari_head
            return self.branch_c, self.block.S_c, self.cari_head
        if modality == VISUAL:
            return self.branch_v, self.block.S_v, self.visual_head
        raise ValueError(f"Unknown modality '{modality}'")

    def features(self, images, modality, mode=EVAL, rng=None):
        """[F || G] for single-modality images"""
        branch, S_spec, _ = self._identification_path(modality)
        x = branch.forward(images.astype(self.dtype, copy=False), mode=mode, rng=rng)
        return np.concatenate([x @ self.block.S, x @ S_spec], axis=1)

    def identify(self, images, modality, logits=False):
        """Identity distribution (or logits) for single-modality images, eval mode"""
        branch, S_spec, head = self._identification_path(modality)
        x = branch.forward(images.astype(self.dtype, copy=False), mode=EVAL)
        return head.forward(self._id_input(x @ self.block.S, x @ S_spec), mode=EVAL, logits_only=logits)

    # Loss and gradients

    def loss(self, cari, vis, labels, mode=TRAIN, rng=None):
        """LossBreakdown for a batch; labels is a (N, 3) int array of (y_ve, y_ci, y_vi)"""
        outputs = self.forward(cari, vis, mode=mode, rng=rng)
        breakdown, _ = self._loss_terms(outputs, labels)
        return breakdown

    def _loss_terms(self, outputs, labels):
        # Validate label layout before any loss is computed
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.shape[1] != 3 or labels.shape[0] != outputs['o_ve'].shape[0]:
            raise ShapeError('pair labels (N, 3)', (outputs['o_ve'].shape[0], 3), tuple(labels.shape))
        # Verification term
        l_ve, g_ve = binary_cross_entropy(outputs['o_ve'], labels[:, 0])
        # Identification terms for each modality
        if self.beta > 0 or self.gamma > 0:
            l_ci, g_ci = nll_loss(outputs['p_ci'], labels[:, 1])
            l_vi, g_vi = nll_loss(outputs['p_vi'], labels[:, 2])
        else:
            # verification-only runs still report identification loss when labels allow
            try:
                l_ci, g_ci = nll_loss(outputs['p_ci'], labels[:, 1])
                l_vi, g_vi = nll_loss(outputs['p_vi'], labels[:, 2])
            except LabelError:
                l_ci = l_vi = np.zeros(1)
                g_ci = np.zeros_like(outputs['p_ci'], dtype=np.float64)
                g_vi = np.zeros_like(outputs['p_vi'], dtype=np.float64)
        # Orthogonality penalty between shared and specific subspaces
        pc, pv = self.block.penalty_terms()
        l_ortho = self.block.lambda_c * pc + self.block.lambda_v * pv
        # Weighted total over batch means
        mean_ve, mean_ci, mean_vi = float(np.mean(l_ve)), float(np.mean(l_ci)), float(np.mean(l_vi))
        total = self.alpha * mean_ve + self.beta * mean_ci + self.gamma * mean_vi + l_ortho
        breakdown = LossBreakdown(l_ve=mean_ve, l_ci=mean_ci, l_vi=mean_vi, l_ortho=l_ortho, total=total,
                                  alpha=self.alpha, beta=self.beta, gamma=self.gamma, penalty_c=pc, penalty_v=pv)
        return breakdown, (g_ve, g_ci, g_vi)

    def _head_backward(self, head, grad_out, weight):
        if weight == 0:
            return np.zeros((grad_out.shape[0], head.in_dim), dtype=self.dtype), head.zero_grads()
        return head.backward(grad_out.astype(self.dtype))

    def backward_full(self, loss_grads):
        """
        Gradients of LossBreakdown.total wrt every parameter, averaged over the batch

        The projection gradients are the chained head terms plus the penalty terms
        2 Lc S_c S_c^T S + 2 Lv S_v S_v^T S (S), 2 Lc S S^T S_c (S_c), 2 Lv S S^T S_v (S_v)
        """
        state = self._state
        if state is None:
            raise RuntimeError("backward_full called with no recorded forward pass")
        g_ve, g_ci, g_vi = loss_grads
        n = state.n
        k = self.block.k
        S, S_c, S_v = self.block.S, self.block.S_c, self.block.S_v

        # Step 1: Backpropagate each head, scaled by its loss weight
        d_ver, ver_grads = self._head_backward(self.ver_head, (self.alpha * g_ve / n)[:, None], self.alpha)
        d_ci, cari_grads = self._head_backward(self.cari_head, self.beta * g_ci / n, self.beta)
        d_vi, visual_grads = self._head_backward(self.visual_head, self.gamma * g_vi / n, self.gamma)

        # Step 2: Split head input gradients into shared (F) and specific (G) parts
        dF_c = d_ver[:, :k]
        dF_v = d_ver[:, k:] + d_vi[:, :k]
        dG_v = d_vi[:, k:]
        if self.feature_mode == 'shared_only':
            dG_v = np.zeros((n, self.block.m), dtype=self.dtype)

        # Step 3: Chain into the projection matrices and the branch features
        grad_S = state.x_c.T @ dF_c + state.x_v.T @ dF_v
        grad_S_v = state.x_v.T @ dG_v
        grad_S_c = np.zeros_like(S_c)
        dX_cv = None
        if self.feature_mode == 'visual_features_only':
            # Caricatures go through the visual branch and the visual-specific matrix
            dF_cv, dG_cv = d_ci[:, :k], d_ci[:, k:]
            grad_S = grad_S + state.x_cv.T @ dF_cv
            grad_S_v = grad_S_v + state.x_cv.T @ dG_cv
            dX_cv = dF_cv @ S.T + dG_cv @ S_v.T
            dX_c = dF_c @ S.T
        else:
            dF_c = dF_c + d_ci[:, :k]
            dG_c = d_ci[:, k:] if self.feature_mode != 'shared_only' else np.zeros((n, self.block.m), dtype=self.dtype)
            grad_S = state.x_c.T @ dF_c + state.x_v.T @ dF_v
            grad_S_c = state.x_c.T @ dG_c
            dX_c = dF_c @ S.T + dG_c @ S_c.T
        dX_v = dF_v @ S.T + dG_v @ S_v.T

        # Step 4: Add the orthogonality penalty gradients
        pen_S, pen_S_c, pen_S_v = self.block.penalty_gradients()
        grads = {
            'projection.S': (grad_S + pen_S).astype(self.dtype),
            'projection.S_c': (grad_S_c + pen_S_c).astype(self.dtype),
            'projection.S_v': (grad_S_v + pen_S_v).astype(self.dtype),
        }

        # Step 5: Backpropagate through the convolutional branches
        _, grads_c = self.branch_c.backward(dX_c)
        _, grads_v = self.branch_v.backward(dX_v)
        if dX_cv is not None:
            _, grads_cv = self.branch_cv.backward(dX_cv)
            grads_v = {i: (gw + grads_cv[i][0], gb + grads_cv[i][1]) for i, (gw, gb) in grads_v.items()}
        # Tied branches share one parameter set, so both modalities' gradients are summed
        if self.tied_weights:
            grads_c = {i: (gw + grads_v[i][0], gb + grads_v[i][1]) for i, (gw, gb) in grads_c.items()}
        self._collect_branch(grads, self.branch_c, grads_c)
        if not self.tied_weights:
            self._collect_branch(grads, self.branch_v, grads_v)

        # Step 6: Collect head parameter gradients under their parameter names
        for head, head_grads in ((self.ver_head, ver_grads), (self.cari_head, cari_grads),
                                 (self.visual_head, visual_grads)):
            for i, (gw, gb) in enumerate(head_grads):
                grads[f"{head.name}.fc{i}.weight"] = gw
                grads[f"{head.name}.fc{i}.bias"] = gb
        return grads

    @staticmethod
    def _collect_branch(grads, branch, branch_grads):
        for i, (gw, gb) in branch_grads.items():
            grads[f"{branch.name}.conv{i}.weight"] = gw
            grads[f"{branch.name}.conv{i}.bias"] = gb

    def compute_gradients(self, cari, vis, labels, mode=TRAIN, rng=None):
        """Forward, loss and backward for one batch: (LossBreakdown, grads)"""
        outputs = self.forward(cari, vis, mode=mode, rng=rng)
        breakdown, loss_grads = self._loss_terms(outputs, labels)
        return breakdown, self.backward_full(loss_grads)

    def gradcheck_objective(self, batch, seed=0):
        """Objective over all non-frozen parameters for numerics.grad_check"""
        cari, vis, labels = batch
        frozen = self.frozen_names()
        _, grads = self.compute_gradients(cari, vis, labels, mode=TRAIN, rng=np.random.default_rng(seed))

        def objective():
            return self.loss(cari, vis, labels, mode=TRAIN, rng=np.random.default_rng(seed)).total

        tensors = {name: array for name, array in self.named_parameters() if name not in frozen}
        analytic = {name: grads[name] for name in tensors}
        return objective, tensors, analytic

    # Input gradients for visualization

    def logit_input_gradient(self, images, modality, neuron):
        """(logit value per image, d logit[neuron] / d images) for an identification head"""
        branch, S_spec, head = self._identification_path(modality)
        if not 0 <= neuron < head.out_dim:
            raise ValueError(f"neuron {neuron} outside identification head width {head.out_dim}")
        x = branch.forward(images.astype(self.dtype, copy=False), mode=EVAL)
        logits = head.forward(self._id_input(x @ self.block.S, x @ S_spec), mode=EVAL, logits_only=True)
        grad_logits = np.zeros_like(logits)
        grad_logits[:, neuron] = 1.0
        d_in, _ = head.backward(grad_logits, from_logits=True)
        k = self.block.k
        dX = d_in[:, :k] @ self.block.S.T
        if self.feature_mode != 'shared_only':
            dX = dX + d_in[:, k:] @ S_spec.T
        grad_images, _ = branch.backward(dX)
        return logits[:, neuron], grad_images

    def rectified_feature_gradient(self, images, modality, hook=None):
        """Gradient of sum([F || G]) wrt images with every intermediate gradient clamped at zero"""
        branch, S_spec, _ = self._identification_path(modality)
        x = branch.forward(images.astype(self.dtype, copy=False), mode=EVAL)
        n = x.shape[0]
        grad_x = np.ones((n, self.block.k), dtype=self.dtype) @ self.block.S.T
        grad_x = grad_x + np.ones((n, S_spec.shape[1]), dtype=self.dtype) @ S_spec.T
        grad_images, _ = branch.backward(grad_x, rectify=True, hook=hook)
        return grad_images


def stack_pairs(pairs):
    """Stack CrossModalPair-like objects into (cari, vis, labels) arrays"""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot stack an empty batch")
    cari = np.stack([p.caricature for p in pairs])
    vis = np.stack([p.visual for p in pairs])
    labels = np.array([[p.labels.y_ve, p.labels.y_ci, p.labels.y_vi] for p in pairs], dtype=np.int64)
    return cari, vis, labels


def extract_features(branch, image, mode=EVAL):
    """X = f(I; Theta) for one image (C, H, W) or a batch (N, C, H, W)"""
    batched = image.ndim == 4
    x = branch.forward(image if batched else image[None], mode=mode)
    return x if batched else x[0]


def loss(model, pairs, weights=None):
    """
    LossBreakdown over a pair or batch of pairs (train mode, fixed dropout stream)

    weights, when given, apply to this call only; the model keeps its own
    """
    pairs = pairs if isinstance(pairs, (list, tuple)) else [pairs]
    cari, vis, labels = stack_pairs(pairs)
    saved = (model.alpha, model.beta, model.gamma)
    if weights is not None:
        model.alpha, model.beta, model.gamma = normalize_weights(weights)
    try:
        return model.loss(cari, vis, labels, mode=TRAIN, rng=derive_rng(model.seed, 'model', 'loss'))
    finally:
        model.alpha, model.beta, model.gamma = saved


def predict(model, pair):
    o_ve, p_ci, p_vi = model.predict(pair.caricature[None], pair.visual[None])
    return float(o_ve[0]), p_ci[0], p_vi[0]
