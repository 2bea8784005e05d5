"""Set up a deployment, vault three partitions, un-vault one and recover the rest."""

from vaultlab.orchestrator import RecoveryKind, World, bootstrap, run_health_check, run_recovery, run_unvault


def main():
    world = World(seed=1)
    pairs = bootstrap(world, [1_000_000, 2_000_000, 3_000_000])
    print(f"vaulted {len(pairs)} partitions at height {world.chain.height}")

    trace = run_unvault(world, pairs[0].vault_txid)
    print("\n".join(trace.lines()))

    report = run_health_check(world, nonce=b"demo")
    print(f"health check ok={report.ok} non_destructive={report.non_destructive}")

    trace = run_recovery(world, RecoveryKind.FULL)
    world.mine(2)
    print("\n".join(trace.lines()))
    print(world.distribution())


if __name__ == "__main__":
    main()
