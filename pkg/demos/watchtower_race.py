"""An attacker holding the active keys publishes an AVT; the watchtower answers with the P2RW.

Run it with a private bribe to see the attacker get ahead of a public recovery.
"""

import sys

from vaultlab.chain import Visibility
from vaultlab.orchestrator import Feerates, World, bootstrap
from vaultlab.script import multisig_script
from vaultlab.threats import race
from vaultlab.txkit import KeyPair


def main(bribe=10):
    world = World(seed=3, feerates=Feerates(attacker=2, recovery=20, bribe=bribe))
    [pair] = bootstrap(world, [1_000_000])
    thief = multisig_script(1, [KeyPair(b"\x07" * 32, "thief").public])
    world.attacker_scripts.add(thief.to_bytes())
    theft = world.active_spend(pair, thief)

    world.broadcast(pair.avt, visibility=Visibility.PUBLIC)
    for _ in range(world.topology.T + 1):
        world.chain.submit(theft, Visibility.MINER_PRIVATE)
        world.mine()
    spender = world.chain.spender_of(pair.vault_outpoint)
    print("vault output spent by", "P2RW" if spender == pair.p2rw.txid else "thief")
    print(world.chain.event_log(), end="")

    # the bare fee race between two conflicting spends
    for owner_rate, attacker_rate, private in ((10, 5, False), (5, 2, True)):
        print(f"owner {owner_rate} vs attacker {attacker_rate} private={private}:",
              race(owner_rate, attacker_rate, private, bribe=bribe))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
