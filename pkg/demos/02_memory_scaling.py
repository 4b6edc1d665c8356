"""
Why progressive training is cheap in memory
===========================================

Each progressive step builds its own graph and frees it after its backward
pass.  Peak live activations therefore depend on the step length T', not on
the number of steps P.  An integrated (one-shot) trainer on the same total
length grows linearly instead.
"""
from pgt.analysis import peak_activation_memory
from pgt.layers import Model, ModelSpec
from pgt.schedule import make_schedule

spec = ModelSpec(8, 4, ["temporal:16:3:pmco", "relu", "temporal:16:3:cmco-max", "relu", "temporal:16:3:mco"])
pgt = Model(spec, seed=0)
local = Model(spec.with_variant("local"), seed=0)

print(" P   T   progressive   integrated")
for p in (1, 2, 4, 8):
    sched = make_schedule(None, 8, p)
    prog = peak_activation_memory(pgt, None, sched, batch=4)
    full = peak_activation_memory(local, sched.total_length, batch=4)
    print(f"{p:2d} {sched.total_length:3d} {prog:13d} {full:12d}")

# The Markov state handed between steps is tiny by comparison: one frame
# (or one pooled vector) per temporal layer.
