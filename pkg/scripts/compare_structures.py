"""Classic vs gradient-free structure comparison: bytes on the wire and the
simulated time model, at matched tensors and iteration counts.

Usage: python scripts/compare_structures.py [iterations]
"""

import sys
from pathlib import Path

from splitstream.config import load_config
from splitstream.experiment import build_world, protocol_config, synthesize_data
from splitstream.models import pretrain_autoencoder
from splitstream.protocol import SimClock, run_split_training
from splitstream.rng import RngState

ROOT = Path(__file__).parent.parent


def main():
    iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 50
    clock = SimClock(t_client=1.0, t_server=2.0, rate=2e5)
    ledgers = {}
    for mode, defense in (("classic", "none"), ("gradient_free", "ours_plus_plus")):
        cfg = load_config(ROOT / "configs" / "reference.ini")
        cfg.dataset.n_train = 64
        cfg.pretrain.ae_epochs = 1
        cfg.protocol.mode = mode
        cfg.protocol.iterations = iterations
        cfg.defense.kind = defense
        cfg.attacks.methods = []
        cfg.validate()
        data = synthesize_data(cfg)
        ae = pretrain_autoencoder(data.train[0], 1, RngState(cfg.seed).split("autoencoder"))
        world = build_world(cfg, defense, ae, data, 0.16)
        pcfg = protocol_config(cfg)
        pcfg.clock = clock
        res = run_split_training(world, pcfg)
        ledgers[mode] = res.ledger
        d = res.ledger.to_dict(clock)
        print(f"{mode:14s} up={d['bytes_up']:>9} B  down={d['bytes_down']:>8} B  "
              f"t_seq={d['t_total_sequential']:8.1f}  t_pipe={d['t_total_pipelined']:8.1f}")
    ratio = ledgers["classic"].total_bytes() / ledgers["gradient_free"].total_bytes()
    print(f"\nbyte ratio classic/gradient_free = {ratio:.2f}")


if __name__ == "__main__":
    main()
