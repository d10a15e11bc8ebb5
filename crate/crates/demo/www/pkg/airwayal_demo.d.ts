/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Phantom summary as JSON.
     */
    info(): string;
    /**
     * Generates a phantom; `branches` must be odd.
     */
    constructor(seed: number, branches: number, noise: number);
    /**
     * RGBA pixels of z-slice `index`, or the projection when `index` is negative.
     */
    render(index: number, gt: boolean, pred: boolean, centerline: boolean): Uint8Array;
    /**
     * Thresholds the image into a prediction and scores it; JSON report.
     */
    score(threshold: number, postprocess: boolean, bd_fraction: number): string;
    static size(): number;
    /**
     * Skeletonizes the ground truth and parses its tree; JSON summary.
     */
    skeletonize(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_info: (a: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_render: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly demo_score: (a: number, b: number, c: number, d: number) => [number, number];
    readonly demo_size: () => number;
    readonly demo_skeletonize: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
