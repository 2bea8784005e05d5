"""Two vault layers: a leaked AVT is answered by re-vaulting, not by the recovery wallet."""

from vaultlab.fleet import Role
from vaultlab.threats import CompromiseSet, RunOptions, evaluate


def main():
    for layers in (1, 2):
        out = evaluate(CompromiseSet(avt_storage=True), RunOptions(revault_layers=layers), strategies=["avt_flood"])
        touched = sum(len(h.access_log) for h in out.world.fleet.by_role(Role.RECOVERY))
        print(f"layers={layers}: {out.line()} recovery-HM accesses={touched}")


if __name__ == "__main__":
    main()
