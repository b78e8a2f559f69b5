import numpy as np


class Optimizer:
    def __init__(self, params, lr, weight_decay=0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def _grad(self, p):
        # coupled L2: decay enters through the gradient
        if self.weight_decay:
            return p.grad + self.weight_decay * p.value
        return p.grad

    def step(self):
        for p in self.params:
            self._update(p)
            p.zero_grad()


class SGD(Optimizer):
    """SGD with heavy-ball momentum: v <- mu*v + g; w <- w - lr*v."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum

    def _update(self, p):
        g = self._grad(p)
        if self.momentum:
            v = p.state.get("momentum")
            v = g.copy() if v is None else self.momentum * v + g
            p.state["momentum"] = v
            g = v
        p.value -= (self.lr * g).astype(p.value.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.betas = betas
        self.eps = eps

    def _update(self, p):
        b1, b2 = self.betas
        g = self._grad(p)
        t = p.state.get("t", 0) + 1
        m = p.state.get("m", np.zeros_like(p.value))
        v = p.state.get("v", np.zeros_like(p.value))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p.state.update(t=t, m=m, v=v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)
