from setuptools import setup, find_packages

# Read the README for the long description
with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="robustface",
    version="0.1.0",
    description="Adversarially robust face embeddings: contrastive adversarial pre-training "
                "and triplet-loss adversarial fine-tuning",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Environment :: Console",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "termcolor>=2.3.0",
    ],
    extras_require={
        "png": ["pypng>=0.20220715.0"],
        "test": ["pytest>=7.0", "pypng>=0.20220715.0"],
    },
    entry_points={
        'console_scripts': [
            'robustface=robustface.cli.main:main',
        ],
    },
    python_requires=">=3.9",
)
