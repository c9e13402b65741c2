// Typed client for the review service HTTP API. This file is the UI's only
// contact with the backend.

export interface ReviewCard {
  sampleId: string;
  entity: string;
  carrierText: string;
  language: string;
  clipUrl: string;
  fullUrl: string;
}

export interface Progress {
  pending: number;
  accepted: number;
  rejected: number;
  total: number;
}

export type Verdict = "ACCEPT" | "REJECT";

export interface DecisionPayload {
  sampleId: string;
  verdict: Verdict;
  reviewer: string;
  note?: string;
}

export interface ApiClient {
  fetchNext(reviewer: string): Promise<ReviewCard | null>;
  submitDecision(decision: DecisionPayload): Promise<Progress>;
  fetchProgress(): Promise<Progress>;
}

export class HttpApiClient implements ApiClient {
  constructor(private readonly baseUrl: string) {}

  async fetchNext(reviewer: string): Promise<ReviewCard | null> {
    const response = await fetch(
      `${this.baseUrl}/api/queue/next?reviewer=${encodeURIComponent(reviewer)}`,
    );
    if (response.status === 204) {
      return null;
    }
    if (!response.ok) {
      throw new Error(`queue/next failed: HTTP ${response.status}`);
    }
    const body = await response.json();
    return {
      sampleId: body.sample_id,
      entity: body.entity,
      carrierText: body.carrier_text,
      language: body.language,
      clipUrl: this.baseUrl + body.clip_url,
      fullUrl: this.baseUrl + body.full_url,
    };
  }

  async submitDecision(decision: DecisionPayload): Promise<Progress> {
    const response = await fetch(`${this.baseUrl}/api/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        sample_id: decision.sampleId,
        verdict: decision.verdict,
        reviewer: decision.reviewer,
        note: decision.note ?? "",
      }),
    });
    if (!response.ok) {
      throw new Error(`decision failed: HTTP ${response.status}`);
    }
    return (await response.json()) as Progress;
  }

  async fetchProgress(): Promise<Progress> {
    const response = await fetch(`${this.baseUrl}/api/progress`);
    if (!response.ok) {
      throw new Error(`progress failed: HTTP ${response.status}`);
    }
    return (await response.json()) as Progress;
  }
}
