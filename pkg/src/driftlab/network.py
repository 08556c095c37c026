"""Small trainable ε predictor with handwritten backpropagation.

Input features are [x_t, sinusoidal embedding of t, learned embedding of c],
followed by two tanh hidden layers and a linear output of size dim:

    h0 = [x, temb(t), E[c]]
    a1 = tanh(h0 W1 + b1)
    a2 = tanh(a1 W2 + b2)
    y  = a2 W3 + b3
"""

import copy
import logging
from collections import OrderedDict

import numpy as np

from .denoiser import Denoiser
from .errors import DimMismatchError
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

# Declaration order of the parameter arrays.  Checkpoints and flattened
# parameter vectors follow this order.
PARAM_ORDER = ('class_embed', 'W1', 'b1', 'W2', 'b2', 'W3', 'b3')

def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps: [sin(t f_k), cos(t f_k)]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * freqs[None]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

class MLPDenoiser(Denoiser):
    """Two-hidden-layer fully connected ε predictor.

    Attributes:
        params: OrderedDict of parameter arrays, see PARAM_ORDER
        hidden, time_embed, class_embed: layer widths
        T: step count the net was built for
    """
    backend = 'mlp'

    def __init__(self, dim: int, n_classes: int, T: int, hidden: int = 64,
                 time_embed: int = 16, class_embed: int = 8,
                 rng: np.random.Generator = None, params: dict = None):
        assert time_embed % 2 == 0, "time_embed must be even"
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.T = int(T)
        self.hidden = int(hidden)
        self.time_embed = int(time_embed)
        self.class_embed = int(class_embed)

        if params is not None:
            self.params = OrderedDict((k, np.array(params[k], dtype=np.float64))
                                      for k in PARAM_ORDER)
            self._check_shapes()
        else:
            assert rng is not None, "need rng or params"
            self.params = self._init_params(rng)

    def _shapes(self) -> dict:
        d_in = self.dim + self.time_embed + self.class_embed
        h = self.hidden
        return {'class_embed': (self.n_classes, self.class_embed),
                'W1': (d_in, h), 'b1': (h,),
                'W2': (h, h), 'b2': (h,),
                'W3': (h, self.dim), 'b3': (self.dim,)}

    def _check_shapes(self):
        for name, shape in self._shapes().items():
            if self.params[name].shape != tuple(shape):
                raise DimMismatchError(
                    f"{name} has shape {self.params[name].shape}, expected {shape}")

    def _init_params(self, rng: np.random.Generator) -> OrderedDict:
        shapes = self._shapes()
        params = OrderedDict()
        for name in PARAM_ORDER:
            shape = shapes[name]
            if name.startswith('b'):
                params[name] = np.zeros(shape)
            elif name == 'class_embed':
                params[name] = 0.1 * rng.standard_normal(shape)
            else:
                scale = 1.0 / np.sqrt(shape[0])
                if name == 'W3':
                    scale *= 0.1  # start near the zero predictor
                params[name] = scale * rng.standard_normal(shape)
        return params

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "MLPDenoiser":
        return copy.deepcopy(self)

    def config(self) -> dict:
        return {'dim': self.dim, 'n_classes': self.n_classes, 'T': self.T,
                'hidden': self.hidden, 'time_embed': self.time_embed,
                'class_embed': self.class_embed}

    def _features(self, x: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = time_embedding(t, self.time_embed)
        cemb = self.params['class_embed'][c]
        return np.concatenate([x, temb, cemb], axis=1)

    def forward(self, x: np.ndarray, t, c: np.ndarray):
        """Returns the prediction and the cache backward() needs."""
        p = self.params
        h0 = self._features(x, t, c)
        a1 = np.tanh(h0 @ p['W1'] + p['b1'])
        a2 = np.tanh(a1 @ p['W2'] + p['b2'])
        y = a2 @ p['W3'] + p['b3']
        return y, (h0, a1, a2, c)

    def backward(self, cache, dy: np.ndarray) -> OrderedDict:
        """Parameter gradients given dL/dy."""
        p = self.params
        h0, a1, a2, c = cache
        grads = OrderedDict()

        grads['W3'] = a2.T @ dy
        grads['b3'] = dy.sum(axis=0)
        dz2 = (dy @ p['W3'].T) * (1.0 - a2 ** 2)
        grads['W2'] = a1.T @ dz2
        grads['b2'] = dz2.sum(axis=0)
        dz1 = (dz2 @ p['W2'].T) * (1.0 - a1 ** 2)
        grads['W1'] = h0.T @ dz1
        grads['b1'] = dz1.sum(axis=0)

        dh0 = dz1 @ p['W1'].T
        g_embed = np.zeros_like(p['class_embed'])
        np.add.at(g_embed, c, dh0[:, self.dim + self.time_embed:])
        grads['class_embed'] = g_embed

        return OrderedDict((k, grads[k]) for k in PARAM_ORDER)

    def predict(self, x_t: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        if x_t.shape[1] != self.dim:
            raise DimMismatchError(f"input dim {x_t.shape[1]} != model dim {self.dim}")
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (x_t.shape[0],))
        self.check_labels(c)
        y, _ = self.forward(x_t, t, c)
        return y

    def loss_and_grads(self, x_t: np.ndarray, t, c: np.ndarray,
                       target: np.ndarray, w: np.ndarray):
        """Weighted denoising loss mean_i w_i ||ε̂_i - target_i||² / dim
        and its parameter gradients."""
        n = x_t.shape[0]
        y, cache = self.forward(x_t, t, c)
        resid = y - target
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
        loss = float(np.sum(w[:, None] * resid ** 2) / (n * self.dim))
        dy = 2.0 * w[:, None] * resid / (n * self.dim)
        return loss, self.backward(cache, dy)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def set_flat_params(self, theta: np.ndarray) -> None:
        i = 0
        for k in PARAM_ORDER:
            size = self.params[k].size
            self.params[k] = theta[i:i + size].reshape(self.params[k].shape).copy()
            i += size
