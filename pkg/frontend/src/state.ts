/** Mixer state and its exact mapping onto /api/generate request bodies. */

export const MODALITIES = ["partial", "class", "text", "silhouette"] as const;
export type Modality = (typeof MODALITIES)[number];

export const SLIDER_MAX_POS = 30; // positions 0..30 map to weights 0.0..3.0

export interface MixerState {
  selectedClass: string | null;
  keywords: string[];
  partialId: string | null;
  /** silhouette rides on the selected partial shape's sample */
  silhouetteOn: boolean;
  /** integer slider positions per modality (0..SLIDER_MAX_POS) */
  sliderPos: Record<Modality, number>;
  seed: number;
  steps: number;
  /** allow generation with no conditions at all */
  unconditional?: boolean;
}

export interface HistoryEntry {
  body: string; // exact JSON bytes that were POSTed
  label: string;
  state: "done" | "failed";
}

export function initialState(): MixerState {
  return {
    selectedClass: null,
    keywords: [],
    partialId: null,
    silhouetteOn: false,
    sliderPos: { partial: 10, class: 10, text: 10, silhouette: 10 },
    seed: 1,
    steps: 100,
  };
}

/** Affine slider mapping: position k -> weight k / 10, exactly. */
export function sliderToWeight(pos: number): number {
  if (!Number.isInteger(pos) || pos < 0 || pos > SLIDER_MAX_POS) {
    throw new Error(`slider position out of range: ${pos}`);
  }
  return pos / 10;
}

export function weightToSlider(weight: number): number {
  const pos = Math.round(weight * 10);
  return Math.min(Math.max(pos, 0), SLIDER_MAX_POS);
}

interface ConditionJson {
  modality: Modality;
  payload: Record<string, unknown>;
  weight: number;
}

/** Enabled modalities in canonical order with their payloads and weights. */
export function activeConditions(state: MixerState): ConditionJson[] {
  const out: ConditionJson[] = [];
  if (state.partialId !== null) {
    out.push({
      modality: "partial",
      payload: { sample_id: state.partialId },
      weight: sliderToWeight(state.sliderPos.partial),
    });
  }
  if (state.selectedClass !== null) {
    out.push({
      modality: "class",
      payload: { class: state.selectedClass },
      weight: sliderToWeight(state.sliderPos.class),
    });
  }
  if (state.keywords.length > 0) {
    out.push({
      modality: "text",
      payload: { keywords: [...state.keywords] },
      weight: sliderToWeight(state.sliderPos.text),
    });
  }
  if (state.silhouetteOn && state.partialId !== null) {
    out.push({
      modality: "silhouette",
      payload: { sample_id: state.partialId },
      weight: sliderToWeight(state.sliderPos.silhouette),
    });
  }
  return out;
}

/**
 * Serialize the request deterministically: same state -> identical bytes,
 * which is what makes history resubmission byte-exact.
 */
export function buildRequestBody(state: MixerState): string {
  return JSON.stringify({
    conditions: activeConditions(state),
    seed: state.seed,
    steps: state.steps,
  });
}

export function canSubmit(state: MixerState): boolean {
  // at least one modality enabled, or the explicit unconditional toggle
  return activeConditions(state).length > 0 || state.unconditional === true;
}
