"""Run a scripted experiment preset with automated trend checks.

The `tables-8-9` preset trains an SHF-4 source plus targets holding
independent keys, attacks the source, and checks the key-sensitivity
trend: the self-cell ("same key as target") shows near-total attack
success, while changing only the key collapses transferability.

This demo shrinks every budget so it finishes in a few minutes; the CLI
equivalent at full desk scale is

    enctransfer reproduce --experiment tables-8-9

Run from the repository root:  python3 demos/05_reproduce_trends.py
"""

from enctransfer import harness

base = harness.ExperimentConfig(
    n_train=600, n_test=200, n_attack=40,
    epochs=6, n_iter=30, attack_kinds=("APGD_CE",),
    master_seed=0, output_dir="/tmp/demo_tables_8_9")

manifest, report, checks = harness.reproduce("tables-8-9", base, log=print)

print()
print(harness.format_table(report))
for name, ok, detail in checks:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
print(f"\nartifacts (checkpoints, AE batches, CSV/JSON/text reports,")
print(f"manifest with checksums) under {base.output_dir}")
