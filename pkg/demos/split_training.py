"""Train DMH-T and DMH-E as client/server splits and compare what crosses the wire.

Run: python3 demos/split_training.py
"""
from dmh.data import SyntheticSpec, generate_synthetic
from dmh.engine import TrainConfig, evaluate
from dmh.split import run_split_training, transmission_ratio

trials = generate_synthetic(SyntheticSpec(n_trials=6, length=300, seed=0))
fleet = [trials[:2], trials[2:4]]   # two vehicles, each with its own trials
held_out = trials[4:]
config = TrainConfig(epochs=20, lr=0.003, seed=1)

for mode in ("T", "E"):
    run = run_split_training(fleet, mode, config=config)
    print(f"\nDMH-{mode}: server holds {len(run.server.sessions)} prediction networks")
    for k, client_run in enumerate(run.clients):
        client = client_run.client
        ratio = transmission_ratio(client_run.ledger, client.spec.n_features, client.window)
        mae = evaluate(client_run.checkpoint(), held_out).mae
        best = client.best_epoch
        print(f"  vehicle {k}: groups {client.spec.n_h}, activation floats/sample "
              f"{client_run.ledger.forward_floats_per_sample()}, ratio {ratio:.3f}, "
              f"best epoch {best}, held-out MAE {mae:.3f}")
