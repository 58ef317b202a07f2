"""
Drift study
Constant per-frame drift on trajectories of growing length: ATE-RMSE grows
with the sequence length while RPE stays constant
"""

import os
import sys

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from stereovo import lie
from stereovo.solver import chain_trajectory
from stereovo.trajeval import ate_rmse, rpe

LENGTHS = [10, 25, 50, 100, 200, 400]
STEP = lie.TangentPose(v=[0.001, 0.0, 0.0005], w=[0.0, 0.004, 0.0])
DRIFT = lie.TangentPose(v=[0.0, 0.00005, 0.0], w=[0.0, 0.0, np.radians(0.05)])

os.makedirs('results', exist_ok=True)
est_step = lie.log_map(lie.compose(lie.exp_map(STEP), lie.exp_map(DRIFT)))

print("Simulating constant drift...")
rows = []
for n in LENGTHS:
    gt = chain_trajectory([STEP] * n)
    est = chain_trajectory([est_step] * n)
    t_err, r_err = rpe(est, gt)
    rows.append({
        'n_frames': n + 1,
        'ate_rmse': ate_rmse(est, gt),
        'rpe_trans_mean': float(np.mean(t_err)),
        'rpe_rot_mean': float(np.mean(r_err)),
    })
    print(f"  {n + 1:>4} poses: ATE-RMSE {rows[-1]['ate_rmse']:.6f}, "
          f"RPE-trans {rows[-1]['rpe_trans_mean']:.3e}, RPE-rot {rows[-1]['rpe_rot_mean']:.4f} deg")

table = pd.DataFrame(rows)
table.to_csv('results/drift_study.csv', index=False, float_format='%.12g')
print("Saved results/drift_study.csv")

fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
ax[0].plot(table['n_frames'], table['ate_rmse'], marker='o')
ax[0].set_xlabel('poses')
ax[0].set_ylabel('ATE-RMSE')
ax[1].plot(table['n_frames'], table['rpe_trans_mean'], marker='o')
ax[1].set_xlabel('poses')
ax[1].set_ylabel('RPE-trans')
fig.tight_layout()
fig.savefig('results/drift_study.png', dpi=120)
print("Saved results/drift_study.png")
