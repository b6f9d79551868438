"""Forward/backward sanity checks on individual layers, printed step by step."""
import numpy as np

from xraynet import nn

rng = np.random.default_rng(0)

# a 1-at-center kernel is the identity under cross-correlation with pad 1
x = rng.standard_normal((1, 1, 5, 5))
k = np.zeros((1, 1, 3, 3))
k[0, 0, 1, 1] = 1.0
y, _ = nn.conv2d(x, k, np.zeros(1))
print("identity conv max |y - x|:", np.abs(y - x).max())

# 3x3 / stride 2 pooling shrinks 128 -> 63 -> 31 -> 15 -> 7
side = 128
chain = [side]
for _ in range(4):
    side = nn.pool_out(side)
    chain.append(side)
print("pooling chain:", chain)

# batch norm in train mode standardizes each channel
state = nn.BatchNormState.fresh(3)
z, _ = nn.batchnorm(rng.normal(5.0, 3.0, (16, 3, 4, 4)), state, "train")
print("BN output mean/var per channel:", z.mean(axis=(0, 2, 3)).round(6), z.var(axis=(0, 2, 3)).round(4))

# finite-difference check of the dense layer
w, b = rng.standard_normal((6, 4)), rng.standard_normal(4)
err = nn.grad_check(lambda x_, w_, b_: nn.dense(x_, w_, b_), nn.dense_backward,
                    [rng.standard_normal((3, 6)), w, b])
print(f"dense gradient max relative error: {err:.2e}")
