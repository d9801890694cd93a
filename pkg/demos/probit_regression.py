"""Fit a probit regression posterior with parallel EP and aEP and compare both to the CGA."""
import numpy as np

from eplab.asymptotics import ep_fixed_point
from eplab.engine import RunConfig, aep_pass, initialize, run, to_aep
from eplab.gaussian import NaturalParamsND, density, kl_gaussian_nd
from eplab.newton import ObjectiveND, cga
from eplab.sites import generate_regression_data
from eplab.tilted import make_moments_fn


def main(n=100, seed=0):
    data = generate_regression_data("probit", n, seed)
    sites = data.sites()
    mom = make_moments_fn(sites)

    ep = ep_fixed_point(sites, mom)
    q_ep = density(ep.final_state.global_params)
    print(f"EP   status={ep.status} passes={ep.passes_used}")

    prior = NaturalParamsND(sites[0].params["precision_matrix"], sites[0].params["shift"])
    start = to_aep(initialize(len(sites), prior=prior))
    aep = run(start, sites, mom, RunConfig(damping=0.4, max_passes=200), pass_fn=aep_pass)
    q_aep = density(aep.final_state.global_params)
    print(f"aEP  status={aep.status} passes={aep.passes_used}")

    q_cga = cga(ObjectiveND.from_sites(sites), q_ep.mean)
    np.set_printoptions(precision=4, suppress=True)
    print("true coefficients", data.alpha_true)
    print("EP mean          ", q_ep.mean)
    print("aEP mean         ", q_aep.mean)
    print("CGA mean         ", q_cga.mean)
    print(f"KL(EP, CGA) = {kl_gaussian_nd(q_ep, q_cga):.3e}   KL(EP, aEP) = {kl_gaussian_nd(q_ep, q_aep):.3e}")


if __name__ == "__main__":
    main()
