#!/usr/bin/env python3
"""Smoke test for the hgcp_py extension module.

Builds nothing itself: expects `cargo build -p hgcp-py` to have produced
target/debug/libhgcp_py.so. Copies the shared object next to a temp dir
under the import name `hgcp_py.so`, imports it, and exercises the main
surface: reward primitives, environment stepping, agent init/save/load,
rollouts, a speed sweep, and a miniature training run.

Usage: python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

_checks = 0


def check(cond, label):
    global _checks
    _checks += 1
    if not cond:
        print(f"FAIL {label}")
        sys.exit(1)
    print(f"ok {label}")


def import_module(tmp):
    built = os.path.join(REPO, "target", "debug", "libhgcp_py.so")
    if not os.path.exists(built):
        print("libhgcp_py.so not found; run `cargo build -p hgcp-py` first")
        sys.exit(2)
    shutil.copy(built, os.path.join(tmp, "hgcp_py.so"))
    sys.path.insert(0, tmp)
    import hgcp_py

    return hgcp_py


def main():
    tmp = tempfile.mkdtemp(prefix="hgcp-smoke-")
    hg = import_module(tmp)

    # --- module constants and reward primitives -------------------------
    check(hg.OBS_DIM == 773, "OBS_DIM")
    check(hg.ACTION_DIM == 2, "ACTION_DIM")
    check(hg.speed_reward(2.0, 2.0) == 1.0, "speed_reward exact match")
    check(hg.speed_reward(1.0, 3.0) == -1.0, "speed_reward clipped")
    check(hg.nav_train_reward((0.0, 0.0), (3.0, 4.0)) == -5.0, "nav_train_reward 3-4-5")
    check(hg.nav_eval_reward((0.0, 0.0), (0.5, 0.0)) == -8.0, "nav_eval_reward boundary miss")
    check(hg.nav_eval_reward((0.0, 0.0), (0.49, 0.0)) == -0.5, "nav_eval_reward touch")
    check(hg.effective_horizon(3000, 8) == 375, "effective_horizon 3000/8")
    check(hg.effective_horizon(12, 8) == 2, "effective_horizon ceil")
    try:
        hg.effective_horizon(10, 0)
        check(False, "effective_horizon k=0 rejected")
    except ValueError:
        check(True, "effective_horizon k=0 rejected")

    # --- environment stepping -------------------------------------------
    env = hg.Env.locomotion(2.0, body="biped", episode_len=50, seed=3)
    check(env.episode_len == 50, "loco episode_len")
    check(len(env.observation()) == hg.OBS_DIM, "obs dim")
    done = False
    for _ in range(50):
        obs, reward, done = env.step([1.0, 0.0])
    check(done, "loco done after episode_len steps")
    check(env.speed > 1.0, "full throttle reaches speed")
    check(abs(reward - hg.speed_reward(env.speed, 2.0)) < 1e-12, "loco reward consistent")
    try:
        env.step([0.0, 0.0])
        check(False, "step after done rejected")
    except ValueError:
        check(True, "step after done rejected")
    env.reset(seed=4)
    check(env.step_count == 0 and not env.done, "reset clears state")

    nav = hg.Env.navigation("box5", variant="train", episode_len=40, seed=1)
    rewards = []
    for t in range(40):
        _, r, _ = nav.step([math.sin(t * 0.7), math.cos(t * 0.3)])
        rewards.append(r)
    check(all(r <= 0.0 for r in rewards), "nav train rewards non-positive")
    check(
        abs(rewards[-1] - hg.nav_train_reward(nav.pos, nav.target)) < 1e-12
        or rewards[-1] == -0.5,
        "nav reward matches primitive",
    )

    # --- agent init / save / load / rollout ------------------------------
    agent = hg.Agent.init("flat", "locomotion", body="biped", seed=7, small=True)
    check(agent.kind == "flat", "agent kind")
    check(agent.family == "locomotion/biped", "agent family")
    check(agent.dims()["h_dim"] > 0, "agent dims dict")
    groups = agent.groups()
    check(any(name.startswith("wm.") for name, _, _ in groups), "wm groups present")
    check(any(name.startswith("flat.") for name, _, _ in groups), "policy groups present")

    roll = agent.rollout_locomotion(2.0, episode_len=30, seed=11)
    check(roll["length"] == 30, "rollout length")
    check(len(roll["rewards"]) == 30 and len(roll["actions"]) == 30, "rollout records")

    prefix = os.path.join(tmp, "smoke-agent")
    agent.save(prefix)
    check(os.path.exists(prefix + ".ckpt") and os.path.exists(prefix + ".meta"), "save wrote files")
    loaded = hg.Agent.load(prefix)
    roll2 = loaded.rollout_locomotion(2.0, episode_len=30, seed=11)
    check(roll2["return"] == roll["return"], "load reproduces eval rollout")
    ck = hg.checkpoint_groups(prefix + ".ckpt")
    check(sorted(ck) == sorted(groups), "checkpoint_groups matches live agent")

    sweep = agent.evaluate_speed([0.0, 1.0], episodes=1, episode_len=20, seed=5)
    check(len(sweep) == 2 and sweep[0][0] == 0.0, "speed sweep rows")

    hier = hg.Agent.init("hierarchical", "navigation", seed=9, small=True)
    nav_roll = hier.rollout_navigation("box5", variant="eval", episode_len=25, seed=2)
    check(len(nav_roll["rewards"]) == 25, "nav rollout length")
    check("targets_reached" in nav_roll, "nav rollout counts targets")

    # --- miniature training run ------------------------------------------
    cfg_path = os.path.join(tmp, "train.cfg")
    with open(cfg_path, "w") as f:
        f.write(
            "kind = flat\n"
            "task = locomotion_band\n"
            "v_lo = 1.0\nv_hi = 3.0\n"
            "episode_len = 25\n"
            "total_steps = 100\n"
            "train_every = 25\n"
            "eval_every = 50\n"
            "eval_episodes = 1\n"
            "h_dim = 24\nz_dim = 8\nenc_hidden = 48\ndec_hidden = 48\n"
            "pol_hidden = 24\nvae_hidden = 32\ngoal_k = 4\ngoal_c = 6\n"
            "imagination_horizon = 8\n"
        )
    out_dir = os.path.join(tmp, "run")
    trained, report = hg.train(cfg_path, out_dir, seed=1)
    check(math.isfinite(report["final_eval"]), "train final_eval finite")
    check(report["updates"] == 4 and report["episodes"] == 4, "train update count")
    check(os.path.exists(report["metrics_path"]), "metrics.csv written")
    check(os.path.exists(str(report["ckpt_prefix"]) + ".ckpt"), "final checkpoint written")
    check(trained.kind == "flat", "trained agent returned")

    print(f"PASS smoke_test ({_checks} checks)")
    shutil.rmtree(tmp, ignore_errors=True)


if __name__ == "__main__":
    main()
