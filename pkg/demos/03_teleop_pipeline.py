# %% [markdown]
# # Streaming control loop and recorder
#
# The control loop retargets at 100 Hz and publishes command vectors on a
# bus.  A recorder samples the latest command at 30 Hz between pedal
# presses and writes one episode per press pair.

# %%
import tempfile
from pathlib import Path

from teledex.body_retarget import default_config
from teledex.kinematics import load_model
from teledex.motion_source import MotionSpec, synth_motion
from teledex.teleop_pipeline import (BadChecksum, TriggerEvent, WireMessage, decode_message, encode_message,
                                     read_episode, run_session, write_episode)

body = load_model("g1body")
hand = load_model("wuji20")

# %% [markdown]
# ## Wire format
#
# Messages carry a topic, a microsecond timestamp and a payload, framed
# with a magic, a version byte, lengths and a CRC32.

# %%
raw = encode_message(WireMessage("cmd", 1_000_000, b'{"hello": 1}'))
print(len(raw), "bytes:", raw[:20].hex(" "), "...")
print(decode_message(raw))
bad = bytearray(raw)
bad[10] ^= 0x40
try:
    decode_message(bytes(bad))
except BadChecksum as exc:
    print("corruption caught:", exc)

# %% [markdown]
# ## A three-second session
#
# Under a simulated clock the run is exact: 300 commands, and a 2 s pedal
# window gives 60 recorded frames.

# %%
frames = synth_motion(MotionSpec(3.0, 100.0, seed=0))
res = run_session(frames, default_config(body), body, None,
                  [TriggerEvent("start", 500_000), TriggerEvent("stop", 2_500_000)], hand=hand)
print("published:", res.control.published, "overruns:", res.control.overruns)
print("episodes:", [len(e.frames) for e in res.episodes])

# %% [markdown]
# ## Episode files

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = write_episode(res.episodes[0], Path(tmp) / "episode_000")
    back = read_episode(path)
    print(sorted(p.name for p in path.iterdir()))
    print("frames back:", len(back.frames), "first t_us:", back.frames[0].timestamp_us)
