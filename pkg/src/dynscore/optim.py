import numpy as np

__all__ = ["AdamW"]


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay, on flat vectors.

    State (``m``, ``v``, ``step``) is plain numpy so it can be copied and
    compared bit-for-bit.
    """

    def __init__(self, n_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.lr = float(lr)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step = 0

    def update(self, params, grad):
        """Return the updated parameter vector; ``params`` is not modified."""
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        new = params * (1.0 - self.lr * self.weight_decay)
        return new - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"m": self.m.copy(), "v": self.v.copy(), "step": self.step}
