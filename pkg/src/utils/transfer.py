# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Transfer policy over an adaptively refined dyadic partition."""

import abc
import logging
from types import MappingProxyType
from typing import Dict, Mapping, Optional, Sequence, Tuple

from utils.elimination import (
    AuxIndex,
    BinBanditState,
    Bounds,
    BoundParams,
    OracleBounds,
    c_star,
    elim_init,
    max_depth,
)
from utils.environment import AuxDataset
from utils.errors import DomainError, PairingError
from utils.geometry import BinId, bin_of, check_level, children, root

_logger = logging.getLogger(__name__)


class PartitionPolicy(abc.ABC):
    """Partition tree whose leaves run successive elimination.

    A leaf splits once it has more than one active arm, every active arm has
    reached its pull limit and its level is below `max_level`. Children
    inherit the active arms of their parent. A leaf whose pull limits are all
    zero first drops the arms the auxiliary data alone rules out. Subclasses
    provide the confidence bound.

    Args:
        dim: Covariate dimension.
        n_arms: Arm count.
        max_level: Deepest level a leaf may reach, None for no cap.
    """

    def __init__(self, dim: int, n_arms: int, max_level: Optional[int]) -> None:
        if n_arms < 1:
            raise DomainError(f"Arm count must be positive, not {n_arms}")
        self.dim = dim
        self.n_arms = n_arms
        self.max_level = max_level
        self.t = 0
        self._aux: Optional[AuxIndex] = None
        self._leaves: Dict[BinId, BinBanditState] = {}
        self._visits: Dict[BinId, int] = {}
        self._pending: Optional[Tuple[Tuple[float, ...], int, BinId]] = None

    @abc.abstractmethod
    def _bounds(self, b: BinId) -> Bounds:
        """Build the confidence bound of bin `b`."""

    def _start(self, aux: AuxIndex) -> None:
        """Plant the root leaf with every arm active."""
        self._aux = aux
        top = root(self.dim)
        self._leaves = {top: self._spawn(top, range(1, self.n_arms + 1))}
        self._visits = {top: 0}

    def _spawn(self, b: BinId, arms: Sequence[int]) -> BinBanditState:
        assert self._aux is not None
        return elim_init(b, arms, self._aux, self._bounds(b))

    @property
    def leaves(self) -> Mapping[BinId, BinBanditState]:
        """Current leaves of the partition."""
        return MappingProxyType(self._leaves)

    @property
    def visits(self) -> Mapping[BinId, int]:
        """Number of observed steps routed to each leaf."""
        return MappingProxyType(self._visits)

    def locate(self, x: Sequence[float]) -> BinId:
        """Find the leaf that owns point `x`.

        Raises:
            DomainError: Raised if `x` lies outside the cube.
        """
        if len(x) != self.dim:
            raise DomainError(f"Expected a {self.dim}-dimensional point, got {len(x)}")
        level = 0
        while True:
            b = bin_of(level, x)
            if b in self._leaves:
                return b
            level += 1

    def _should_split(self, state: BinBanditState) -> bool:
        if len(state.active) <= 1 or not state.exhausted:
            return False
        return self.max_level is None or state.bin.level < self.max_level

    def _split(self, b: BinId) -> None:
        state = self._leaves[b]
        if all(state.limits[k] == 0 for k in state.active):
            kept = state.prune_with_aux()
            dropped = set(state.active) - set(kept)
            if dropped:
                _logger.debug(f"Auxiliary data eliminated arms {dropped} in bin {b}")
            state.active[:] = kept
        arms = list(state.active)
        del self._leaves[b]
        self._visits.pop(b, None)
        for child in children(b):
            self._leaves[child] = self._spawn(child, arms)
            self._visits[child] = 0
        _logger.debug(f"Split bin {b} with arms {arms}")

    def select(self, x: Sequence[float]) -> int:
        """Choose the arm to pull at covariate `x`.

        Raises:
            DomainError: Raised if `x` lies outside the cube.
            PairingError: Raised if the previous selection was not observed.
        """
        x = tuple(float(v) for v in x)
        if self._pending is not None:
            raise PairingError("The previous selection awaits its reward")
        b = self.locate(x)
        while self._should_split(self._leaves[b]):
            self._split(b)
            b = self.locate(x)
        arm = self._leaves[b].select()
        self._pending = (x, arm, b)
        return arm

    def observe(self, x: Sequence[float], arm: int, reward: float) -> None:
        """Route the reward of the preceding selection to its leaf.

        Raises:
            PairingError: Raised if `x` and `arm` do not match the preceding selection.
        """
        x = tuple(float(v) for v in x)
        if self._pending is None or self._pending[:2] != (x, arm):
            raise PairingError(f"Arm {arm} at {x} does not answer the preceding selection")
        b = self._pending[2]
        self._pending = None
        self._leaves[b].observe(arm, reward)
        self._visits[b] += 1
        self.t += 1


class TransferPolicy(PartitionPolicy):
    """Minimax-optimal transfer policy with known smoothness and transfer parameters.

    With an empty auxiliary log the policy is plain adaptively binned
    successive elimination.

    Args:
        params: Oracle bound parameters.
        aux: Auxiliary log collected on the source bandit.
        n_arms: Arm count.
        c_gamma: Transfer constant.
        q_lo: Lower bound on the target density.
    """

    def __init__(
        self,
        params: BoundParams,
        aux: AuxDataset,
        n_arms: int = 2,
        c_gamma: float = 1.0,
        q_lo: float = 1.0,
    ) -> None:
        if aux.dim != params.dim:
            raise DomainError(f"Auxiliary covariates have dimension {aux.dim}, not {params.dim}")
        self.params = params
        self.c_gamma = c_gamma
        self.q_lo = q_lo
        self.c_star = c_star(params.c_beta, c_gamma, q_lo, n_arms)
        self.l_star = max_depth(
            params.n_q,
            params.n_p,
            params.kappa,
            params.gamma,
            params.beta,
            params.dim,
            self.c_star,
        )
        check_level(self.l_star, params.dim)
        super().__init__(params.dim, n_arms, self.l_star)
        _logger.debug(f"Transfer policy with c*={self.c_star:.6g} and l*={self.l_star}")
        self._start(AuxIndex(aux, self.l_star))

    def _bounds(self, b: BinId) -> Bounds:
        return OracleBounds(b, self.params)
