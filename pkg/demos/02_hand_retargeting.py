# %% [markdown]
# # Fingertip-to-joint hand retargeting
#
# The oracle is an IK solve per finger.  It is exact on reachable tips but
# iterative, so a small finger-wise network is trained on oracle labels and
# used at run time instead.

# %%
import numpy as np

from teledex.hand_retarget import (HandTrainParams, calibrate_scale, canonical_poses, eval_retargeter,
                                   fingertip_positions, generate_pair_dataset, infer_hand, oracle_retarget,
                                   random_hand_tips, train_hand_retargeter)
from teledex.kinematics import load_model

hand = load_model("wuji20")

# %% [markdown]
# ## The oracle
#
# Tips rendered from a known configuration are matched to numerical
# precision.  Each finger has four joints for a 3-D target, so the joint
# angles themselves need not come back unchanged.

# %%
rng = np.random.default_rng(0)
q = rng.uniform(hand.lower, hand.upper)
out = oracle_retarget(hand, fingertip_positions(hand, q))
print("per-finger residual (m):", np.array2string(out.residuals, precision=1))
print("largest joint difference (rad):", round(float(np.abs(out.q - q).max()), 3))

# %% [markdown]
# ## Hand size
#
# A larger operator hand is mapped through one scale, the ratio of mean
# fingertip reach in the open pose.

# %%
poses = canonical_poses(hand)
human_open = 1.15 * fingertip_positions(hand, poses["open"])
scale = calibrate_scale(human_open, hand)
print("scale for a hand 15% larger:", round(scale, 4))

# %% [markdown]
# ## Training on oracle labels
#
# A few thousand frames and a raised learning rate keep this quick; the
# full recipe is 20k frames at lr 1e-4 for up to 300 epochs.

# %%
tips = random_hand_tips(hand, 3000, np.random.default_rng(1), human_size=1.15)
ds = generate_pair_dataset(hand, tips, scale, seed=0)
reg, report = train_hand_retargeter(ds, hand, HandTrainParams(lr=1e-3, batch_size=256, epochs=60))
print(f"validation loss {report.init_val_loss:.3f} -> {min(report.val_loss):.4f} "
      f"(best epoch {report.best_epoch}, {report.stop_reason})")
m = eval_retargeter(reg, ds)
print("held-out RMS per joint (rad):", np.array2string(m.rms_per_joint, precision=3))
print(f"overall {m.rms:.3f} rad, {m.latency_s * 1e3:.2f} ms per frame")

# %% [markdown]
# Outputs pass through tanh onto the joint ranges, so even nonsense input
# yields a configuration strictly inside the limits.

# %%
wild = infer_hand(reg, np.full(15, 3.0))
print("inside limits:", bool(np.all((wild > hand.lower) & (wild < hand.upper))))
