"""User-level differentially private federated training of embedding models.

Two training modes share one round loop: ``fedavg`` privatizes the whole
model including a global class head, ``fedemb`` trains a throwaway head
inside every virtual client and privatizes only the embedding backbone.
"""

__version__ = "0.1.0"
