"""Smart-meter occupancy privacy testbed: attack, billing-neutral defense, setup ledger."""

__version__ = "0.1.0"
