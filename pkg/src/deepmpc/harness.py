"""Scenario orchestration: the closed control loop, logging, and exports.

``run_scenario`` executes one seeded simulation of the selected
controller variant; ``compare_controllers`` races the three variants
across seeds.  Logs capture everything the diagnostics need, including
ground-truth disturbance values the controllers never see.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import diagnostics as diag
from . import mpc as mpc_mod
from . import network as net_mod
from . import plant as plant_mod
from . import trainer as trainer_mod
from .errors import ConfigurationError, TrainingDiverged

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationLog:
    """Trace plus events and the run summary."""

    trace: diag.TrajectoryTrace
    events: tuple
    summary: dict
    config_name: str = "scenario"


@dataclass(frozen=True)
class RuntimeContext:
    """Validated, fully derived scenario state shared by run and check."""

    config: object
    tightened: mpc_mod.TightenedSets
    mpc: mpc_mod.MpcConfig          # with terminal ingredients filled in
    ingredients: mpc_mod.TerminalIngredients
    reference: mpc_mod.ReferenceTrajectory
    sigma: float
    u_max_a: float
    w_prime: float
    initial_network: object | None

    @property
    def growth_rate(self):
        return mpc_mod.growth_rate(self.config.model,
                                   self.reference.max_input_norm())


def setup_scenario(config):
    """Validate a scenario and derive sets, ingredients, and the reference.

    Raises :class:`ConfigurationError` subclasses for empty tightened
    sets, an overspent input budget, or an infeasible governor.
    """
    model, sets = config.model, config.sets
    # The tightened sets and the reference are shared by every variant:
    # the tube baseline is the identical controller with the adaptive
    # path zeroed, so comparisons measure disturbance rejection rather
    # than differences in governor authority.
    sigma = float(np.sqrt(config.net_widths[-1] + 1))
    u_max_a, w_prime = net_mod.control_authority_bounds(
        config.column_bounds, sigma, model.delta_g, sets.w_max,
        u_max=sets.u_max)
    if config.variant == "tube":
        network = None
    else:
        network = config.initial_network
        if network is None:
            init_rng = np.random.default_rng(_seed_streams(config.seed)[1])
            network = net_mod.init_feature_network(
                config.net_widths, config.net_activations, init_rng)
        if network.sigma_bound != sigma:
            raise ConfigurationError(
                "initial network width disagrees with the configured sizes")
    tightened = mpc_mod.tighten_constraints(
        sets, w_prime, model, config.mpc.effective_governor_horizon, u_max_a,
        u_margin_fraction=config.mpc.u_margin_fraction,
        x_margin=config.mpc.x_margin,
        x_margin_scale=config.mpc.x_margin_scale)
    ingredients = mpc_mod.terminal_ingredients(
        model, config.mpc.q, config.mpc.r, tightened.u_prime_bound,
        qf_scale=config.mpc.qf_scale)
    mpc_cfg = config.mpc.with_terminal(ingredients)
    reference = mpc_mod.solve_reference_governor(
        model, config.x0, mpc_cfg, tightened)
    return RuntimeContext(config=config, tightened=tightened, mpc=mpc_cfg,
                          ingredients=ingredients, reference=reference,
                          sigma=sigma, u_max_a=u_max_a, w_prime=w_prime,
                          initial_network=network)


def _seed_streams(seed):
    """Stable child seeds: (noise, network init, trainer)."""
    return np.random.SeedSequence(seed).spawn(3)


class _Recorder:
    """Accumulates per-step records and freezes them into a trace."""

    def __init__(self, t_sim, d, m, p):
        self.times = np.arange(t_sim)
        self.states = np.zeros((t_sim + 1, d))
        self.ref_states = np.zeros((t_sim, d))
        self.u_adaptive = np.zeros((t_sim, m))
        self.u_mpc = np.zeros((t_sim, m))
        self.u_applied = np.zeros((t_sim, m))
        self.h_true = np.zeros((t_sim, m))
        self.u_tilde = np.zeros((t_sim, m))
        self.phi = np.zeros((t_sim, p))
        self.v_m = np.zeros(t_sim)
        self.v_hat_next = np.full(t_sim, np.nan)
        self.stage_cost = np.zeros(t_sim)
        self.g_u_tilde_norm = np.zeros(t_sim)
        self.k_snapshots = np.zeros((t_sim + 1, p, m))
        self.generation = np.zeros(t_sim, dtype=np.int64)
        self.state_in_x = np.zeros(t_sim, dtype=bool)
        self.predicted_next = np.zeros((t_sim, d))

    def freeze(self):
        return diag.TrajectoryTrace(
            times=self.times, states=self.states, ref_states=self.ref_states,
            u_adaptive=self.u_adaptive, u_mpc=self.u_mpc,
            u_applied=self.u_applied, h_true=self.h_true,
            u_tilde=self.u_tilde, phi=self.phi, v_m=self.v_m,
            v_hat_next=self.v_hat_next, stage_cost=self.stage_cost,
            g_u_tilde_norm=self.g_u_tilde_norm, k_snapshots=self.k_snapshots,
            generation=self.generation, state_in_x=self.state_in_x,
            predicted_next=self.predicted_next)


def run_scenario(config):
    """Execute one closed-loop simulation and return its log.

    Per step: evaluate features and the adaptive input, solve the
    tracking MPC, apply the summed input to the true plant, update the
    output weights from the innovation, store the pair in the replay
    buffer, and advance the training schedule.  The tube variant zeroes
    the adaptive path and never touches network or trainer code.
    """
    ctx = setup_scenario(config)
    model, sets = config.model, config.sets
    d, m = model.state_dim, model.input_dim
    adaptive = config.variant != "tube"
    seeds = _seed_streams(config.seed)
    noise_rng = np.random.default_rng(seeds[0])
    trainer_rng = np.random.default_rng(seeds[2])

    network = ctx.initial_network
    p = network.feature_dim if adaptive else 1
    weights = (net_mod.OutputWeights.zeros(p, config.column_bounds, config.theta)
               if adaptive else None)
    buffer = trainer_mod.ReplayBuffer(config.trainer.capacity)
    scheduler = trainer_mod.TrainingScheduler(config.trainer)
    worker = None
    if adaptive and config.training_enabled and not config.trainer.synchronous:
        worker = trainer_mod.TrainerWorker()

    rec = _Recorder(config.t_sim, d, m, p)
    events = []
    x = np.asarray(config.x0, dtype=float)
    rec.states[0] = x
    if adaptive:
        rec.k_snapshots[0] = weights.k_matrix
    pending_prediction = None
    training_count = 0
    last_gain = None

    def adaptive_input(state):
        if not adaptive:
            return np.zeros(m), np.zeros(1)
        feats = net_mod.forward_features(network, state)
        return net_mod.adaptive_control(weights, feats), feats

    try:
        for t in range(config.t_sim):
            u_a, phi = adaptive_input(x)
            if pending_prediction is not None and config.log_value_decomposition:
                rec.v_hat_next[t - 1] = mpc_mod.solve_intermediate(
                    model, pending_prediction, ctx.reference, t, ctx.mpc,
                    ctx.tightened, u_a)
            track = mpc_mod.solve_tracking_mpc(
                model, x, u_a, ctx.reference, t, ctx.mpc, ctx.tightened)
            # exact admissibility of the applied input: clip the sum and
            # fold any sub-ulp correction back into the MPC component
            u_total = np.clip(u_a + track.u_mpc, -sets.u_max, sets.u_max)
            u_m = u_total - u_a
            x_next, h = plant_mod.step_true(
                model, sets, config.uncertainty, x, u_total, t, noise_rng)

            gain = getattr(config.uncertainty, "gain", None)
            if gain is not None:
                g_now = config.uncertainty.gain(t)
                if last_gain is not None and g_now != last_gain:
                    events.append((t, "gain_switch", {"gain": g_now}))
                last_gain = g_now
            if not sets.contains_state(x, tol=1e-12):
                events.append((t, "state_violation", {"state": x.copy()}))

            rec.ref_states[t] = ctx.reference.state(t)
            rec.u_adaptive[t] = u_a
            rec.u_mpc[t] = u_m
            rec.u_applied[t] = u_total
            rec.h_true[t] = h
            rec.u_tilde[t] = u_a + h
            rec.phi[t] = phi if adaptive else 0.0
            rec.v_m[t] = track.value
            rec.stage_cost[t] = track.stage_cost
            rec.g_u_tilde_norm[t] = np.linalg.norm(model.g(x) @ (u_a + h))
            rec.generation[t] = network.generation if adaptive else 0
            rec.state_in_x[t] = sets.contains_state(x, tol=1e-12)
            rec.predicted_next[t] = track.predicted_next

            if adaptive:
                weights = net_mod.update_output_weights(
                    weights, phi, x_next, track.predicted_next, model.g(x))
                rec.k_snapshots[t + 1] = weights.k_matrix
                if config.training_enabled:
                    network, training_count = _schedule_step(
                        t, x, u_a, network, weights, buffer, scheduler,
                        worker, config, trainer_rng, events, training_count)
                else:
                    buffer.push_with_selection(x, u_a)

            x = x_next
            rec.states[t + 1] = x
            pending_prediction = track.predicted_next

        if config.log_value_decomposition and config.t_sim > 0:
            u_a_final, _ = adaptive_input(x)
            rec.v_hat_next[config.t_sim - 1] = mpc_mod.solve_intermediate(
                model, pending_prediction, ctx.reference, config.t_sim,
                ctx.mpc, ctx.tightened, u_a_final)
    finally:
        if worker is not None:
            worker.shutdown()

    trace = rec.freeze()
    summary = _summarize(trace, config, events)
    return SimulationLog(trace=trace, events=tuple(events), summary=summary,
                         config_name=config.name)


def _schedule_step(t, x, u_a, network, weights, buffer, scheduler, worker,
                   config, trainer_rng, events, training_count):
    """Collect the pair, and start/finish trainings per the schedule."""
    if worker is not None:
        result = worker.poll()
        if result is not None:
            scheduler.complete_training()
            scheduler.pending_result = result
    actions = scheduler.tick(t, len(buffer))
    for action in actions:
        if action == trainer_mod.COLLECT:
            buffer.push_with_selection(x, u_a)
        elif action == trainer_mod.SWAP_WEIGHTS:
            result = scheduler.pending_result
            scheduler.pending_result = None
            if isinstance(result, TrainingDiverged):
                events.append((t, "training_diverged", {"error": str(result)}))
            elif result is not None:
                network = result.network
                events.append((t, "swap", {
                    "generation": network.generation,
                    "initial_loss": result.initial_loss,
                    "final_loss": result.final_loss,
                    "improved": result.improved,
                }))
        elif action == trainer_mod.START_TRAINING:
            training_count += 1
            xs, labels = buffer.sample(config.trainer.sample_size, trainer_rng)
            k_frozen = weights.k_matrix.copy()
            job_seed = int(trainer_rng.integers(2**63))
            events.append((t, "training_started", {"index": training_count}))
            if worker is None:
                try:
                    result = trainer_mod.train(
                        network, k_frozen, xs, labels, config.trainer,
                        np.random.default_rng(job_seed))
                except TrainingDiverged as exc:
                    result = exc
                scheduler.complete_training()
                scheduler.pending_result = result
            else:
                worker.submit(network, k_frozen, xs, labels, config.trainer,
                              job_seed)
    return network, training_count


def _summarize(trace, config, events):
    t_count = len(trace)
    q = config.mpc.q
    states = trace.states[:t_count]
    tracking_cost = float(np.sum(np.einsum("ti,ij,tj->t", states, q, states)))
    window = max(1, t_count // 10)
    final_norms = np.linalg.norm(trace.states[t_count - window:t_count + 1], axis=1)
    input_violations = int(np.sum(
        np.max(np.abs(trace.u_applied), axis=1) > config.sets.u_max))
    return {
        "variant": config.variant,
        "seed": config.seed,
        "steps": t_count,
        "cumulative_tracking_cost": tracking_cost,
        "final_window_mean_norm": float(final_norms.mean()),
        "final_norm": float(np.linalg.norm(trace.states[t_count])),
        "state_violations": int(np.sum(~trace.state_in_x)),
        "input_violations": input_violations,
        "trainings": sum(1 for _, kind, _ in events if kind == "training_started"),
        "swaps": sum(1 for _, kind, _ in events if kind == "swap"),
    }


# ---------------------------------------------------------------------------
# Controller comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonResult:
    rows: tuple                 # (variant, seed, summary) triples
    win_rates: dict

    def to_text(self):
        lines = [f"{'variant':<9s} {'seed':>5s} {'tracking_cost':>14s} "
                 f"{'final_mean':>11s} {'violations':>10s}"]
        for variant, seed, summary in self.rows:
            lines.append(
                f"{variant:<9s} {seed:>5d} "
                f"{summary['cumulative_tracking_cost']:>14.6f} "
                f"{summary['final_window_mean_norm']:>11.3e} "
                f"{summary['state_violations']:>10d}")
        lines.append("")
        for key, value in self.win_rates.items():
            lines.append(f"{key}: {value:.0%}")
        return "\n".join(lines)

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("variant,seed,cumulative_tracking_cost,"
                     "final_window_mean_norm,state_violations,input_violations\n")
            for variant, seed, s in self.rows:
                fh.write(f"{variant},{seed},{s['cumulative_tracking_cost']!r},"
                         f"{s['final_window_mean_norm']!r},"
                         f"{s['state_violations']},{s['input_violations']}\n")


def compare_controllers(config, seeds, variants=("tube", "shallow", "deep"),
                        log_value_decomposition=False):
    """Run every variant on every seed and tabulate costs and win rates."""
    if not seeds:
        raise ConfigurationError("need at least one seed")
    rows = []
    costs = {v: {} for v in variants}
    for seed in seeds:
        for variant in variants:
            run_cfg = config.with_overrides(
                seed=seed, variant=variant,
                log_value_decomposition=log_value_decomposition)
            log = run_scenario(run_cfg)
            rows.append((variant, seed, log.summary))
            costs[variant][seed] = log.summary["cumulative_tracking_cost"]
    win_rates = {}
    pairs = [("deep", "shallow"), ("shallow", "tube"), ("deep", "tube")]
    for a, b in pairs:
        if a in costs and b in costs:
            wins = [costs[a][s] < costs[b][s] for s in seeds]
            win_rates[f"{a}_beats_{b}"] = float(np.mean(wins))
    return ComparisonResult(rows=tuple(rows), win_rates=win_rates)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def _input_headers(prefix, m):
    if m == 1:
        return [prefix]
    return [f"{prefix}[{i}]" for i in range(m)]


def export_csv(log, path):
    """Write the per-step log as CSV (one row per step, full precision)."""
    trace = log.trace
    t_count = len(trace)
    d = trace.states.shape[1]
    m = trace.input_dim
    event_map = {}
    for t, kind, _ in log.events:
        event_map.setdefault(t, []).append(kind)
    headers = (["t"] + [f"x[{i}]" for i in range(d)]
               + _input_headers("u_a", m) + _input_headers("u_m", m)
               + _input_headers("h", m) + ["V_m", "generation", "events"])
    with open(path, "w") as fh:
        fh.write(",".join(headers) + "\n")
        for t in range(t_count):
            vals = ([str(t)]
                    + [repr(float(v)) for v in trace.states[t]]
                    + [repr(float(v)) for v in trace.u_adaptive[t]]
                    + [repr(float(v)) for v in trace.u_mpc[t]]
                    + [repr(float(v)) for v in trace.h_true[t]]
                    + [repr(float(trace.v_m[t])), str(int(trace.generation[t])),
                       ";".join(event_map.get(t, []))])
            fh.write(",".join(vals) + "\n")


def read_csv_log(path):
    """Parse an exported CSV back into column arrays (for round-trips)."""
    with open(path) as fh:
        headers = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    numeric = {}
    for j, name in enumerate(headers):
        if name == "events":
            numeric[name] = [row[j] for row in rows]
        elif name in ("t", "generation"):
            numeric[name] = np.array([int(row[j]) for row in rows])
        else:
            numeric[name] = np.array([float(row[j]) for row in rows])
    return numeric


def export_plot_data(logs, path):
    """Gnuplot-style roll-angle series per variant plus switch markers.

    One indexed block per log (columns: t, first state coordinate), then
    a final block of vertical marker segments at gain-switch events.
    """
    if isinstance(logs, SimulationLog):
        logs = [logs]
    blocks = []
    switch_times = sorted({t for log in logs
                           for t, kind, _ in log.events if kind == "gain_switch"})
    y_lo = min(float(log.trace.states[:, 0].min()) for log in logs)
    y_hi = max(float(log.trace.states[:, 0].max()) for log in logs)
    for log in logs:
        lines = [f"# variant={log.summary['variant']} seed={log.summary['seed']}"]
        for t in range(len(log.trace)):
            lines.append(f"{t} {log.trace.states[t, 0]!r}")
        blocks.append("\n".join(lines))
    marker_lines = ["# gain switch markers (vertical segments)"]
    for t in switch_times:
        marker_lines.append(f"{t} {y_lo!r}")
        marker_lines.append(f"{t} {y_hi!r}")
        marker_lines.append("")
    blocks.append("\n".join(marker_lines).rstrip())
    with open(path, "w") as fh:
        fh.write("\n\n\n".join(blocks) + "\n")


# ---------------------------------------------------------------------------
# Oracle scenario: uncertainty exactly linear in the controller's own
# frozen features, so the adaptation diagnostics have exact ground truth.
# ---------------------------------------------------------------------------

def oracle_scenario(*, t_sim=400, seed=0, theta=0.5, column_bound=0.05,
                    w_star_fraction=0.8, a=0.5, b=1.0, x0=0.8, u_max=4.0,
                    state_extent=4.0, horizon=3, governor_horizon=10,
                    q=1.0, r=0.2, hidden_width=4, name="oracle"):
    """Scenario with zero reconstruction error by construction.

    A scalar, strongly contractive plant is driven by a disturbance that
    is exactly ``w_star^T phi(x)`` for the run's own (frozen) feature
    stack, so eps vanishes identically, w_star is known, and the
    adaptation and composite-Lyapunov inequalities can be checked without
    estimation error.  Training stays disabled to keep features frozen.
    """
    from .config import ScenarioConfig  # local import avoids a cycle

    model = plant_mod.ControlAffineModel.linear([[a]], [[b]])
    init_rng = np.random.default_rng(_seed_streams(seed)[1])
    network = net_mod.init_feature_network(
        [model.state_dim, hidden_width], ["tanh"], init_rng)
    w_star_rng = np.random.default_rng(np.random.SeedSequence([seed, 9151]))
    direction = w_star_rng.normal(size=(network.feature_dim, 1))
    w_star = (w_star_fraction * column_bound
              * direction / np.linalg.norm(direction))
    uncertainty = net_mod.IdealOracle(w_star=w_star, net=network)
    # exact disturbance bound: ||g h|| <= |b| * ||w_star|| * sigma
    w_max = abs(b) * float(np.linalg.norm(w_star)) * network.sigma_bound
    sets = plant_mod.ConstraintSets(
        state_low=np.array([-state_extent]), state_high=np.array([state_extent]),
        u_max=u_max, w_max=w_max)
    mpc_cfg = mpc_mod.MpcConfig(
        horizon=horizon, q=np.array([[q]]), r=np.array([[r]]),
        governor_horizon=governor_horizon, x_margin=np.array([0.1]))
    trainer_cfg = trainer_mod.TrainerConfig(
        sample_size=50, capacity=100, period=100)
    return ScenarioConfig(
        model=model, sets=sets, uncertainty=uncertainty, variant="deep",
        net_widths=(model.state_dim, hidden_width), net_activations=("tanh",),
        column_bounds=np.array([column_bound]), theta=theta,
        trainer=trainer_cfg, mpc=mpc_cfg, x0=np.array([x0]), t_sim=t_sim,
        seed=seed, training_enabled=False, initial_network=network, name=name)


# ---------------------------------------------------------------------------
# Constants derivation and trace checking
# ---------------------------------------------------------------------------

def derive_scenario_constants(ctx, *, beta=0.0, c_hat=None, c3=None,
                              c3_samples=2000, c3_seed=0):
    """Assemble the stability constants for a prepared scenario.

    ``c3`` may be passed explicitly to skip the sampling estimate (or to
    reuse one across runs of the same scenario).
    """
    config = ctx.config
    c1, c2 = diag.estimate_value_bounds(
        ctx.mpc.q, ctx.mpc.q_terminal, ctx.mpc.horizon, ctx.growth_rate)
    if c3 is None:
        region_low = config.sets.state_low - ctx.w_prime
        region_high = config.sets.state_high + ctx.w_prime
        c3 = diag.estimate_lipschitz_c3(
            config.model, ctx.mpc, ctx.tightened, region_low, region_high,
            n_samples=c3_samples, rng=np.random.default_rng(c3_seed))
    w_bar = float(np.sum(np.asarray(config.column_bounds, dtype=float) ** 2))
    return diag.derive_constants(
        c1=c1, c2=c2, c3=c3, theta=config.theta, sigma=ctx.sigma,
        input_dim=config.model.input_dim, w_prime=ctx.w_prime,
        tube_level=ctx.mpc.tube_level, w_bar=w_bar,
        delta_g=config.model.delta_g, beta=beta, c_hat=c_hat)


def run_standard_checks(trace, constants, u_max, ref_horizon, slack=1e-6):
    """The oracle-free check battery used by the CLI ``check`` command."""
    reports = [
        diag.check_value_sandwich(trace, constants, slack=slack),
        diag.check_iss(trace, constants, slack=slack),
        diag.tube_report(trace, constants, start=ref_horizon, slack=slack),
        diag.check_constraint_satisfaction(trace, u_max),
    ]
    if len(trace) >= 50:
        reports.append(diag.check_mean_square_small(trace, 50, None, constants))
    return reports
