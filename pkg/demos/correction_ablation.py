"""Train the same corrupted data with and without the rival correction.

Prints per-epoch metrics for both arms. Takes well under a minute.
Run: python3 demos/correction_ablation.py
"""

from dataclasses import replace

from advpll import harness, trainer

cfg = harness.ExperimentConfig(c=5, d=8, n_train=1000, n_test=1000, q=0.3, rival_k=2, rival_w=0.5,
                               widths=(32, 32), d_embed=16, batch_size=64, epochs=15)
partial, test, _ = harness.build_datasets(cfg)
tcfg = cfg.train_config()
print(f"warm-up epochs {tcfg.warmup}, queue capacity {tcfg.capacity(partial.clean.n)}")

for correction in harness.CORRECTIONS:
    M = replace(cfg, correction=correction).correction_matrix(cfg.c)
    print(f"\ncorrection={correction}")
    print(" ".join(trainer.MetricsRow.HEADER[:-1]))

    def show(row, state):
        print(f"{row.epoch:3d} {row.cls_loss:.4f} {row.con_loss:.4f} {row.combined:.4f} "
              f"{row.test_acc:.3f} {row.proto_acc:.3f} {row.skipped_queries}")

    trainer.fit(partial, M, tcfg, test, on_epoch=show)
