/* tslint:disable */
/* eslint-disable */

/**
 * Trinomial-chain value of mode 1 at (0, 0).
 */
export function oracle_value(cost: number, sigma: number, levels: number): number;

/**
 * Runs the optimal policy on `n_paths` paths; returns the first `shown` of them.
 */
export function simulate_policy(cost: number, sigma: number, n_paths: number, shown: number, seed: bigint): string;

/**
 * FD value curves at t = 0 and switching boundaries over time.
 */
export function value_curves(cost: number, sigma: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly oracle_value: (a: number, b: number, c: number) => [number, number, number];
    readonly simulate_policy: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly value_curves: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
