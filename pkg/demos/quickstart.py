"""The whole pipeline in one script: generate, train, grow, evaluate.

Generates a small synthetic patch-feature task, fits the base session,
adds two few-shot sessions, then scores the final frozen model with both
classification heads.  Runs in a couple of seconds.

    python3 demos/quickstart.py
"""

from compset import (
    Hyperparams,
    SynthConfig,
    evaluate_sessions,
    synth_generate,
    train_base,
    train_incremental,
)

config = SynthConfig(
    pool_size=20,
    primitives_per_class=3,
    shared_patches=6,
    distractor_patches=2,
    channels=16,
    base_classes=4,
    incremental_sessions=2,
    classes_per_session=2,
    shots=3,
    test_per_class=25,
    train_per_base_class=20,
    seed=0,
)
hp = Hyperparams(n_primitives=6, base_epochs=40, inc_epochs=25, batch_size=16, seed=0)

ds = synth_generate(config)
print(f"task: {config.n_classes} classes over {config.n_sessions} sessions, "
      f"{config.patches} patches x {config.channels} channels per sample")

state = train_base(ds.train[0], hp)
print(f"base session: {state.bank.n_classes} classes, "
      f"loss {state.loss_history[0][0]:.3f} -> {state.loss_history[0][-1]:.3f}")

for session in (1, 2):
    state = train_incremental(state, ds.train[session])
    print(f"session {session}: bank now {state.bank.n_classes} classes "
          f"({config.shots} shots each); earlier blocks frozen bit-for-bit")

for head in ("composition", "baseline"):
    report = evaluate_sessions(state, ds.test, head)
    print()
    print(report.to_text())
