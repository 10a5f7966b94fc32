"""Regenerate the tabulated attenuation and source-spectrum assets.

Requires ``xraydb`` (NIST/Elam tables).  The package itself only reads the
CSV files written here, so xraydb is a build-time dependency only.

    python tools/make_assets.py src/spectral_dps/data
"""

import sys
from pathlib import Path

import numpy as np
import xraydb

ENERGIES = np.arange(10.0, 151.0, 1.0)  # keV
AL_FILTER_CM = 0.25
# Integrated fluence of the filtered 120 kVp spectrum, photons / mAs / ray.
REFERENCE_FLUENCE = 1.0e6
ASSET_VERSION = "1"


def mass_atten(material, density=None):
    ev = ENERGIES * 1000.0
    if density is None:
        return xraydb.mu_elam(material, ev, kind="total")
    return xraydb.material_mu(material, ev, density=density) / density


def kramers(kvp):
    # Unfiltered bremsstrahlung photon number per keV, (E0 - E) / E.
    spec = np.clip(kvp - ENERGIES, 0.0, None) / ENERGIES
    return spec * np.exp(-mass_atten("Al") * 2.699 * AL_FILTER_CM)


def write_csv(path, values, header):
    with open(path, "w") as f:
        f.write(f"# {header}\n# asset_version: {ASSET_VERSION}\n")
        f.write("energy_keV,value\n")
        for e, v in zip(ENERGIES, values):
            f.write(f"{e:.1f},{v:.10e}\n")


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "mu_water.csv", mass_atten("H2O", 1.0), "water mass attenuation cm^2/g")
    write_csv(out / "mu_calcium.csv", mass_atten("Ca"), "calcium mass attenuation cm^2/g")
    write_csv(out / "mu_aluminum.csv", mass_atten("Al"), "aluminum mass attenuation cm^2/g")
    write_csv(out / "mu_csi.csv", mass_atten("CsI", 4.51), "CsI mass attenuation cm^2/g")
    ref = kramers(120.0)
    scale = REFERENCE_FLUENCE / ref.sum()
    for kvp in (80.0, 120.0):
        write_csv(out / f"spectrum_{int(kvp)}kvp.csv", kramers(kvp) * scale,
                  f"Kramers {int(kvp)} kVp, {AL_FILTER_CM * 10:.1f} mm Al, photons/keV/mAs/ray")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/spectral_dps/data")
