//! Temporary diagnostic: compare the reward head's predictions against
//! true rewards along a real episode, and inspect imagined returns.

use hgcp::envs::{Body, TaskSpec};
use hgcp::harness::{collect_episode, Agent};
use hgcp::numerics::{rng_for, Graph};
use hgcp::worldmodel::ModelState;

#[test]
#[ignore]
fn probe_reward_head() {
    let agent = Agent::load(std::path::Path::new("/tmp/clitest/probe_flat/final")).unwrap();
    let spec = TaskSpec::locomotion(2.0, Body::BipedLike, 60).unwrap();
    let ep = collect_episode(&agent, &spec, 42, true, None).unwrap();

    // Re-encode the episode and compare predicted vs true reward.
    let mut rng = rng_for(42, "model", 0);
    let mut state = ModelState::zeros(agent.dims.h_dim, agent.dims.z_dim);
    println!("t  true_r   pred_r   speed");
    for t in 0..ep.len() {
        let action = if t == 0 { [0.0, 0.0] } else { ep.actions[t - 1] };
        state = agent
            .wm
            .encode_posterior(&agent.store, &state, action, &ep.obs[t], true, &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let h = g.constant(1, agent.dims.h_dim, state.h.clone());
        let z = g.constant(1, agent.dims.z_dim, state.z.clone());
        let r = agent.wm.reward_pred(&mut g, &agent.store, h, z);
        let pred = g.value(r)[0];
        if t % 6 == 0 {
            println!("{t:3} {:+8.3} {:+8.3} {:6.2}", ep.rewards[t], pred, ep.speeds[t]);
        }
    }

    // Imagined rollout from the final state under the greedy policy.
    let mut act_rng = rng_for(7, "probe", 0);
    let roll = agent.wm.imagine(
        &agent.store,
        std::slice::from_ref(&state),
        15,
        |s, _| agent.pol.flat_act(&agent.store, s, true, &mut act_rng),
        &mut rng,
    );
    let rews: Vec<f64> = roll.rewards.iter().map(|r| r[0]).collect();
    let acts: Vec<[f64; 2]> = roll.actions.clone();
    println!("imagined greedy rewards: {rews:?}");
    println!("imagined greedy actions: {acts:?}");

    // Same but forcing a braking policy (a = [-1, 0]): does the model
    // predict recovery toward the target speed pays off?
    let mut rng2 = rng_for(43, "model", 0);
    let roll2 = agent.wm.imagine(
        &agent.store,
        std::slice::from_ref(&state),
        15,
        |_, _| [-1.0, 0.0],
        &mut rng2,
    );
    let rews2: Vec<f64> = roll2.rewards.iter().map(|r| r[0]).collect();
    println!("imagined braking rewards: {rews2:?}");
}
