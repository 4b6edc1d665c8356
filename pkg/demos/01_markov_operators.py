"""
Markov temporal convolutions, one step at a time
=================================================

A temporal conv with kernel 3 looks one frame back and one frame ahead.
Progressive training cuts a long sequence into short steps; inside a step the
first frame's "previous frame" is a feature carried over from the step before
(gradient blocked), and the last frame's "next frame" is zero.
"""
import numpy as np

from pgt import autodiff as ad
from pgt.layers import LayerState, OperatorVariant, TemporalConvParams, local_temporal_conv, markov_step_conv

# an averaging kernel on a single channel
avg = TemporalConvParams.from_arrays(np.full((3, 1, 1), 1 / 3))

x = ad.constant(np.array([[1.0], [2.0], [3.0]]))
print("local conv (zero padding):    ", local_temporal_conv(x, avg).value.ravel())

# carry the value 4 in from a previous step
state = LayerState(carried_boundary=np.array([4.0]))
out, _ = markov_step_conv(x, state, avg, OperatorVariant("mco"))
print("markov conv, carried f_past=4:", out.value.ravel())   # [7/3, 2, 5/3]

# The carried value enters through stop_gradient: the loss cannot push
# gradient back into the previous step.
carry = ad.leaf(np.array([4.0]))
out, _ = markov_step_conv(ad.leaf(x.value), LayerState(carried_boundary=carry), avg, OperatorVariant("mco"))
ad.backward(ad.sum(out * out))
print("gradient reaching the carried feature:", carry.grad)

# Three flavours of carry.  MCO passes the last frame, CMCO pools the whole
# step, PMCO keeps a momentum average across all earlier steps.
rng = np.random.default_rng(0)
params = TemporalConvParams.from_arrays(rng.standard_normal((3, 2, 2)))
for token in ("mco", "cmco-avg", "cmco-max", "pmco@0.9"):
    v = OperatorVariant.parse(token)
    s = LayerState()
    for step in range(3):
        _, s = markov_step_conv(ad.constant(rng.standard_normal((4, 2))), s, params, v)
    print(f"{token:9s} carry after 3 steps: {np.round(s.f_past(v), 3)}")
