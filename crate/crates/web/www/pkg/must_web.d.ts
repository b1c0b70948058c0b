/* tslint:disable */
/* eslint-disable */

export function augment_preview(_class: number, target_domain: boolean, size: number, magnitude: number, seed: bigint): Uint8Array;

/**
 * Patch indices masked for one draw, as `{grid, masked, achieved_ratio}`.
 */
export function mask_preview(grid: number, patch_px: number, unit_px: number, ratio: number, seed: bigint): string;

/**
 * Learning-rate, EMA-decay and per-layer learning-rate curves as JSON.
 */
export function schedule_curves(base_lr: number, batch_size: number, total_steps: bigint, ema_mu0: number, ema_mu_n: bigint, depth: number, layer_decay: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly augment_preview: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly mask_preview: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly schedule_curves: (a: number, b: number, c: bigint, d: number, e: bigint, f: number, g: number) => [number, number, number, number];
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
