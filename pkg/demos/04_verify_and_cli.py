"""
Checking the invariants
=======================

``pgt verify`` runs a battery of oracles on small random models.  The same
suite is importable.  Turning off the gradient stop at step boundaries
(a test hook) makes exactly the truncation check fail.
"""
from pgt.verify import run_suite

for r in run_suite(seed=0):
    print(r.line())

print("\nwith stop_gradient disabled:")
for r in run_suite(seed=0, break_truncation=True):
    if not r.passed:
        print(r.line())

# From a shell the same thing is
#   pgt verify
#   pgt verify --break-truncation ; echo $?      # 1
#   pgt train --config run.cfg --set schedule.P=5
