"""Walk through the matching machinery on hand-sized tensors.

Run with ``python3 demos/01_matching_machinery.py``.
"""

# %%
import numpy as np

from mmnet import matching
from mmnet.autodiff import Tensor

rng = np.random.default_rng(0)

# two 3x4 feature maps with 5 channels; the target is the source shifted one column right
src = rng.standard_normal((3, 4, 5))
tgt = np.roll(src, 1, axis=1)

# %%
# the 4-D score tensor S[i, j, m, n] = <src[i, j], tgt[m, n]>
scores = matching.correlate(Tensor(src), Tensor(tgt))
print("score tensor", scores.shape)

# each source cell's best target cell should sit one column to the right
for i, j in [(0, 0), (1, 2), (2, 1)]:
    prob = matching.to_probability(scores, (i, j), "source").data
    m, n = np.unravel_index(prob.argmax(), prob.shape)
    print(f"source ({i},{j}) -> target ({m},{n})  p={prob.max():.3f}")

# %%
# coarse-to-fine: the finer scale only adds a residual on top of the upscaled coarse scores
coarse = Tensor(rng.standard_normal((2, 2, 2, 2)))
residual = Tensor(np.zeros((4, 4, 4, 4)))
fine = matching.complement(residual, coarse)
print("upscaled coarse scores", fine.shape)
print("constants survive upscaling:", np.unique(matching.upscale4d(Tensor(np.full((2, 2, 2, 2), 3.0))).data))

# %%
# the 1-D kernel behind upscale4d: output sample o sits at (o + 0.5) / 2 - 0.5 on the input grid
print(np.round(matching.upsample_matrix(3), 4))

# %%
# keypoint transfer takes the centre of the arg-max cell
stride = 16
points = np.array([[8.0, 8.0], [40.0, 24.0]])
cells = matching.point_to_cell(points, stride, (3, 4))
rows = scores.data.reshape(12, 12)[cells[:, 0] * 4 + cells[:, 1]]
print("transferred:", matching.transfer_rows(rows, (3, 4), stride))
