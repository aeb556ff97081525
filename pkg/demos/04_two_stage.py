# %% [markdown]
# # Two-stage human-to-robot training
#
# Human demonstrations are cheap and varied but carry no robot state, and
# their actions live in a different embodiment.  Pretraining on them and
# fine-tuning on a few robot demonstrations is compared with training on
# robot data only and with mixing both in one stage.

# %%
import dataclasses

from teledex.two_stage import LARGE_WARP, ExperimentConfig, lagged_episodes, run_two_stage, validate_lag

# %% [markdown]
# ## Previous action as state
#
# Without a state stream, the previous action stands in for proprioception.
# That holds if the robot reaches each command one step later, which the
# lag check measures on robot data.

# %%
lag = validate_lag(lagged_episodes(10, 50, 4, lag=1, noise=0.01, seed=0))
print("best lag:", lag.best_k, "errors:", [round(e, 4) for e in lag.errors])

# %% [markdown]
# ## The experiment, one seed
#
# The full comparison uses five seeds; one seed with the default settings
# takes well under a minute.

# %%
cfg = ExperimentConfig(seeds=(0,))
print(run_two_stage(cfg).to_markdown())

# %% [markdown]
# With a large embodiment gap (3x scale, 90 degree rotation), mixing the two
# sources in one stage hurts even on the training distribution.

# %%
big = run_two_stage(dataclasses.replace(cfg, warp=LARGE_WARP, methods=("Mix", "RobotOnly")))
print(big.to_markdown())
